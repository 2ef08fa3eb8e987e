use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn tiny_arch() -> Architecture {
    Architecture {
        embed_dim: 2,
        napl_dim: 2,
        hidden: 4,
        d_model: 8,
        heads: 2,
        d_ff: 16,
        ..Default::default()
    }
}

fn tiny(arch: Architecture) -> StdgrlModel {
    StdgrlModel::new(ModelConfig::new(4, 3, 2, arch, 7)).unwrap()
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

#[test]
fn full_model_census() {
    // E_A 4·2, E_G 4·2, gate pools 3·2·6·4, bias pools 3·2·4, gru proj 4·4+4,
    // embed 2·8+8, block 4·64 + 2·16 + 8·16+16 + 16·8+8, lttl proj 8·4+4,
    // fusion 2·4·4.
    let m = tiny(tiny_arch());
    assert_eq!(m.num_parameters(), 8 + 8 + 144 + 24 + 20 + 24 + 568 + 36 + 32);
    assert_eq!(m.num_parameters(), 864);
    for name in [
        "graph.e_a",
        "graph.e_g",
        "gru.l0.w_z",
        "gru.l0.w_r",
        "gru.l0.w_h",
        "gru.l0.b_z",
        "gru.l0.b_r",
        "gru.l0.b_h",
        "lttl.b0.w_q",
        "lttl.b0.ffn.w1",
        "fusion.w_s",
        "fusion.w_t",
    ] {
        assert!(m.params.contains(name), "{name}");
    }
    assert_eq!(m.params.get("gru.l0.w_z").unwrap().shape(), &[2, 6, 4]);
}

#[test]
fn shared_weights_without_napl() {
    // Pools shrink to [6, 4] and [4]: 3·24 + 3·4 = 84 instead of 168, no E_G.
    let m = tiny(Architecture { use_napl: false, ..tiny_arch() });
    assert_eq!(m.num_parameters(), 772);
    assert!(!m.params.contains("graph.e_g"));
    assert_eq!(m.params.get("gru.l0.w_h").unwrap().shape(), &[6, 4]);
    assert_eq!(m.params.get("gru.l0.b_h").unwrap().shape(), &[4]);
}

#[test]
fn single_branch_variants_skip_fusion() {
    let gru = tiny(Architecture { use_transformer_branch: false, ..tiny_arch() });
    assert!(gru.params.names().iter().all(|n| !n.starts_with("lttl") && !n.starts_with("fusion")));
    let lttl = tiny(Architecture { use_gru_branch: false, ..tiny_arch() });
    assert!(lttl.params.names().iter().all(|n| n.starts_with("lttl")));
    assert_eq!(gru.num_parameters() + lttl.num_parameters() + 32, 864);
    assert!(lttl.adjacency().is_none());
}

#[test]
fn shared_embeddings_drop_e_g() {
    let m = tiny(Architecture { share_embeddings: true, ..tiny_arch() });
    assert_eq!(m.num_parameters(), 856);
    assert!(!m.params.contains("graph.e_g"));
    let bad = ModelConfig::new(4, 3, 2, Architecture { share_embeddings: true, napl_dim: 3, ..tiny_arch() }, 0);
    assert!(matches!(StdgrlModel::new(bad), Err(ModelError::InvalidConfig(_))));
}

#[test]
fn scalar_fusion_has_two_weights() {
    let m = tiny(Architecture { scalar_fusion: true, ..tiny_arch() });
    assert_eq!(m.num_parameters(), 864 - 32 + 2);
    let tape = Tape::inference();
    let y = m.forward(&tape, &random(&[3, 4, 2], 1)).unwrap();
    assert_eq!(y.shape(), vec![2, 4, 2]);
}

#[test]
fn static_graph_support_is_constant() {
    let m = tiny(Architecture { static_graph: true, use_napl: false, ..tiny_arch() });
    assert!(!m.params.contains("graph.e_a"));
    assert!(m.adjacency().is_none());
    let tape = Tape::new();
    let bound = m.params.bind(&tape);
    let s = m.support(&bound, &tape).unwrap();
    assert!(!s.requires_grad());
    assert_eq!(s.to_tensor(), line_graph_support(4));
}

#[test]
fn both_branches_off_is_rejected() {
    let arch = Architecture {
        use_gru_branch: false,
        use_transformer_branch: false,
        ..tiny_arch()
    };
    let err = build_variant(ModelConfig::new(4, 3, 2, arch, 0)).unwrap_err();
    assert!(err.to_string().contains("at least one"), "{err}");
}

#[test]
fn bad_sizes_are_rejected() {
    for arch in [
        Architecture { heads: 3, ..tiny_arch() },
        Architecture { d_model: 7, heads: 1, ..tiny_arch() },
        Architecture { hidden: 0, ..tiny_arch() },
    ] {
        assert!(StdgrlModel::new(ModelConfig::new(4, 3, 2, arch, 0)).is_err());
    }
    assert!(StdgrlModel::new(ModelConfig::new(4, 0, 2, tiny_arch(), 0)).is_err());
}

#[test]
fn default_output_is_twelve_steps() {
    let m = StdgrlModel::new(ModelConfig::new(5, 12, 12, Architecture::default(), 0)).unwrap();
    let tape = Tape::inference();
    let y = m.forward(&tape, &random(&[12, 5, 2], 2)).unwrap();
    assert_eq!(y.shape(), vec![12, 5, 2]);
    assert!(y.value().iter().all(|v| v.is_finite()));
}

#[test]
fn wrong_window_shape_is_rejected() {
    let m = tiny(tiny_arch());
    assert!(m.forward(&Tape::inference(), &random(&[4, 4, 2], 0)).is_err());
    assert!(m.forward(&Tape::inference(), &random(&[3, 5, 2], 0)).is_err());
}

#[test]
fn forward_is_deterministic() {
    let a = tiny(tiny_arch());
    let b = tiny(tiny_arch());
    assert_eq!(a, b);
    let x = random(&[3, 4, 2], 3);
    let ya = a.forward(&Tape::inference(), &x).unwrap().value();
    let yb = b.forward(&Tape::inference(), &x).unwrap().value();
    assert_eq!(
        ya.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        yb.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert_ne!(tiny(tiny_arch()), StdgrlModel::new(ModelConfig::new(4, 3, 2, tiny_arch(), 8)).unwrap());
}

#[test]
fn zero_temporal_weight_isolates_the_spatial_branch() {
    let mut m = tiny(tiny_arch());
    *m.params.get_mut("fusion.w_t").unwrap() = Tensor::zeros(&[4, 4]).with_grad();
    let x = random(&[3, 4, 2], 4);
    let base = m.forward(&Tape::inference(), &x).unwrap().value();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (name, value) in m.params.iter().map(|(n, v)| (n.to_string(), v.clone())).collect::<Vec<_>>() {
        if name.starts_with("lttl") {
            let t = m.params.get_mut(&name).unwrap();
            for v in t.data_mut() {
                *v += rng.gen_range(-3.0..3.0);
            }
            assert_ne!(*t, value);
        }
    }
    assert_eq!(m.forward(&Tape::inference(), &x).unwrap().value(), base);
}

#[test]
fn fuse_examples() {
    let tape = Tape::inference();
    let c = |v: &[f64]| tape.constant(Tensor::new(vec![v.len()], v.to_vec()).unwrap());
    let (ys, yt) = (c(&[1.0, -2.0]), c(&[5.0, 7.0]));
    assert_eq!(fuse(ys, yt, c(&[0.5, 3.0]), c(&[0.0, 0.0])).unwrap().value(), vec![0.5, -6.0]);
    assert_eq!(fuse(ys, yt, c(&[1.0, 1.0]), c(&[1.0, 1.0])).unwrap().value(), vec![6.0, 5.0]);
    assert_eq!(fuse(c(&[3.0]), c(&[4.0]), c(&[2.0]), c(&[0.5])).unwrap().value(), vec![8.0]);
    assert!(fuse(ys, c(&[1.0]), c(&[1.0, 1.0]), c(&[1.0, 1.0])).is_err());
}

#[test]
fn fusion_combines_branch_outputs() {
    let m = tiny(tiny_arch());
    let x = random(&[2, 3, 4, 2], 6);
    let tape = Tape::inference();
    let bound = m.params.bind(&tape);
    let (ys, yt) = m.branches(&bound, tape.constant(x.clone())).unwrap();
    let (ys, yt) = (ys.unwrap().value(), yt.unwrap().value());
    let y = m.forward_batch(&bound, tape.constant(x)).unwrap().to_tensor();
    // Branch outputs are [N, B, m·2]; the model output is [B, m, N, 2].
    for n in 0..4 {
        for b in 0..2 {
            for k in 0..4 {
                let i = (n * 2 + b) * 4 + k;
                let want = 0.5 * ys[i] + 0.5 * yt[i];
                assert_eq!(y.at(&[b, k / 2, n, k % 2]), want);
            }
        }
    }
}

#[test]
fn batch_matches_single_windows() {
    let m = tiny(tiny_arch());
    let x = random(&[3, 3, 4, 2], 7);
    let batch = m.predict_batch(&x).unwrap();
    for b in 0..3 {
        let xb = Tensor::new(vec![3, 4, 2], x.data()[b * 24..(b + 1) * 24].to_vec()).unwrap();
        let yb = m.forward(&Tape::inference(), &xb).unwrap().value();
        let got = &batch.data()[b * 16..(b + 1) * 16];
        for (g, w) in got.iter().zip(&yb) {
            assert!((g - w).abs() < 1e-12);
        }
    }
}

#[test]
fn adjacency_is_row_stochastic() {
    let a = tiny(tiny_arch()).adjacency().unwrap();
    assert_eq!(a.shape(), &[4, 4]);
    for r in 0..4 {
        let s: f64 = (0..4).map(|c| a.at(&[r, c])).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn checkpoint_round_trip() {
    let m = tiny(Architecture { scalar_fusion: true, ..tiny_arch() });
    let bytes = write_checkpoint(&m);
    let back = read_checkpoint(&bytes).unwrap();
    assert_eq!(back, m);
    assert_eq!(write_checkpoint(&back), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&m, &path).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), m);
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let m = tiny(tiny_arch());
    let bytes = write_checkpoint(&m);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(read_checkpoint(&bad), Err(ModelError::Checkpoint(_))));

    let err = read_checkpoint(&bytes[..bytes.len() - 3]).unwrap_err();
    assert!(matches!(err, ModelError::CheckpointBlock { ref name, .. } if name == "fusion.w_t"), "{err}");

    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(read_checkpoint(&long), Err(ModelError::Checkpoint(_))));

    // Poison the last value of the final block.
    let mut nan = bytes.clone();
    let at = nan.len() - 8;
    nan[at..].copy_from_slice(&f64::NAN.to_le_bytes());
    let err = read_checkpoint(&nan).unwrap_err();
    assert!(err.to_string().contains("fusion.w_t"), "{err}");

    // Rename a block: "graph.e_a" -> "graph.e_b".
    let pos = bytes.windows(9).position(|w| w == b"graph.e_a").unwrap();
    let mut renamed = bytes.clone();
    renamed[pos + 8] = b'b';
    let err = read_checkpoint(&renamed).unwrap_err();
    assert!(err.to_string().contains("graph.e_b"), "{err}");
}

#[test]
fn checkpoint_shape_mismatch_names_the_block() {
    let m = tiny(tiny_arch());
    let mut bytes = write_checkpoint(&m);
    // The first block is graph.e_a [4, 2]; rewrite its first dim to 5.
    let pos = bytes.windows(9).position(|w| w == b"graph.e_a").unwrap() + 9 + 4;
    bytes[pos..pos + 8].copy_from_slice(&5u64.to_le_bytes());
    let err = read_checkpoint(&bytes).unwrap_err();
    assert!(matches!(err, ModelError::CheckpointBlock { ref name, .. } if name == "graph.e_a"), "{err}");
}

#[test]
fn end_to_end_gradients() {
    let m = tiny(tiny_arch());
    let x = random(&[2, 3, 4, 2], 8);
    let y = random(&[2, 2, 4, 2], 9);
    let report = crate::autodiff::check_gradients(
        m.params.values(),
        |tape, vars| {
            let bound = m.params.bind_vars(vars.to_vec());
            let pred = m.forward_batch(&bound, tape.constant(x.clone())).map_err(|e| match e {
                ModelError::Tensor(t) => t,
                other => TensorError::Precondition(other.to_string()),
            })?;
            let d = pred.sub(tape.constant(y.clone()))?;
            Ok(d.mul(d)?.mean())
        },
        1e-6,
    )
    .unwrap();
    for (name, err) in m.params.names().iter().zip(&report.max_relative_error) {
        assert!(*err < 1e-4, "{name}: {err}");
    }
}
