use diffgraph::{finite_difference_check, numeric_gradient, Graph, Tensor};
use el_core::embed::{
    create_network, embedding_gradient_parts, embedding_loss, embedding_loss_graph, Bandwidths, EmbedArch,
    EmbeddingEnsemble, EnsembleSpec, DEFAULT_LAMBDA, DEFAULT_OUT_DIM,
};
use el_core::kernel::{mmd2_biased, BandwidthSet};
use el_core::nn::InitScheme;
use el_core::rng::{keyed_rng, normal_tensor};

fn fixed_bw() -> Bandwidths {
    Bandwidths::Fixed(BandwidthSet::geometric(0.5, -2, 2).unwrap())
}

#[test]
fn enumerations_have_four_variants() {
    assert_eq!(EmbedArch::ALL.len(), 4);
    assert_eq!(InitScheme::ALL.len(), 4);
    for a in EmbedArch::ALL {
        assert_eq!(a.name().parse::<EmbedArch>().unwrap(), a);
    }
}

#[test]
fn default_hyperparameters() {
    assert_eq!(DEFAULT_LAMBDA, 10.0);
    assert_eq!(DEFAULT_OUT_DIM, 64);
    let spec = EnsembleSpec::paired(1, 0);
    assert_eq!(spec.nets_per_type, 1);
    assert_eq!(spec.out_dim, 64);
}

#[test]
fn orthogonal_init_is_orthonormal() {
    for a in EmbedArch::ALL {
        let net = create_network(a, InitScheme::Orthogonal, 64, 4).unwrap();
        for (name, p) in net.params().iter() {
            if !name.ends_with(".weight") {
                continue;
            }
            let rows = p.tensor.shape()[0];
            let cols = p.tensor.numel() / rows;
            let w = p.tensor.data();
            let at = |i: usize, j: usize| w[i * cols + j];
            // Gram matrix over the shorter side must be the identity
            let short = rows.min(cols);
            let mut worst = 0.0f64;
            for i in 0..short {
                for j in 0..short {
                    let dot: f64 = if rows >= cols {
                        (0..rows).map(|r| at(r, i) * at(r, j)).sum()
                    } else {
                        (0..cols).map(|c| at(i, c) * at(j, c)).sum()
                    };
                    worst = worst.max((dot - (i == j) as u8 as f64).abs());
                }
            }
            assert!(worst < 1e-8, "{a} {name}: {worst}");
        }
    }
}

#[test]
fn zero_and_fixed_batches_are_pinned() {
    let net = create_network(EmbedArch::SimpleCnn, InitScheme::Xavier, 64, 0).unwrap();
    let z = net.embed(&Tensor::zeros(&[3, 2])).unwrap();
    assert_eq!(z.shape(), &[3, 64]);
    // biases start at zero, so the zero input maps to the zero embedding
    assert!(z.data().iter().all(|&v| v == 0.0));

    let e = net.embed(&Tensor::new(&[1, 2], vec![0.5, -1.0]).unwrap()).unwrap();
    let pinned = [
        -0.013130218613932744,
        0.003976234685926324,
        0.008408065023345753,
        0.007318290734667347,
    ];
    for (got, want) in e.data().iter().zip(pinned) {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
    assert!((e.sum() - 0.00041607429718571376).abs() < 1e-12);

    let img = net.embed(&Tensor::full(&[1, 1, 8, 8], 0.25)).unwrap();
    assert!((img.sum() - -0.006691410979618451).abs() < 1e-12);
}

#[test]
fn embedding_gradient_matches_finite_differences() {
    for a in EmbedArch::ALL {
        for (s, init) in InitScheme::ALL.into_iter().enumerate() {
            let net = create_network(a, init, 16, s as u64).unwrap();
            let x = normal_tensor(&mut keyed_rng(s as u64, "fd-embed"), &[3, 2]);
            let proj = normal_tensor(&mut keyed_rng(s as u64, "proj"), &[3, 16]);
            let r = finite_difference_check(
                |g, v| {
                    let e = net.forward(g, v).unwrap();
                    let p = g.constant(proj.clone());
                    let m = g.mul(e, p)?;
                    Ok(g.sum(m))
                },
                &x,
                // small enough that the stencil rarely straddles a ReLU kink
                1e-7,
            )
            .unwrap();
            assert!(r.max_rel_error < 1e-4, "{a} {init}: {}", r.max_rel_error);
        }
    }
}

#[test]
fn loss_vanishes_for_identical_batches_and_zero_lambda() {
    let ens = EnsembleSpec::paired(1, 3).build().unwrap();
    let x = normal_tensor(&mut keyed_rng(0, "same"), &[12, 2]);
    let y = normal_tensor(&mut keyed_rng(1, "other"), &[12, 2]);
    let bw = Bandwidths::default();
    assert!(embedding_loss(&x, &x, &ens, &bw, 10.0).unwrap().abs() < 1e-10);
    assert_eq!(embedding_loss(&x, &y, &ens, &bw, 0.0).unwrap(), 0.0);
}

#[test]
fn single_network_reduces_to_embedded_mmd() {
    let net = create_network(EmbedArch::Residual, InitScheme::Kaiming, 64, 8).unwrap();
    let ens = EmbeddingEnsemble::new(vec![net.clone()], 1);
    let mut rng = keyed_rng(8, "k1");
    let real = normal_tensor(&mut rng, &[10, 2]);
    let gen = normal_tensor(&mut rng, &[7, 2]);
    let (er, eg) = (net.embed(&real).unwrap(), net.embed(&gen).unwrap());
    for bw in [fixed_bw(), Bandwidths::default()] {
        let set = bw.resolve(&er, &eg).unwrap();
        let want = 2.5 * mmd2_biased(&er, &eg, &set).unwrap();
        let got = embedding_loss(&real, &gen, &ens, &bw, 2.5).unwrap();
        assert!((got - want).abs() < 1e-12 * want.abs().max(1.0), "{got} vs {want}");
    }
}

#[test]
fn ensemble_loss_is_mean_over_members() {
    let ens = EnsembleSpec::full_grid(5).build().unwrap();
    let mut rng = keyed_rng(5, "mean");
    let real = normal_tensor(&mut rng, &[6, 2]);
    let gen = normal_tensor(&mut rng, &[6, 2]);
    let bw = Bandwidths::default();
    let each: f64 = ens
        .networks()
        .iter()
        .map(|n| embedding_loss(&real, &gen, &EmbeddingEnsemble::new(vec![n.clone()], 1), &bw, 1.0).unwrap())
        .sum();
    let got = embedding_loss(&real, &gen, &ens, &bw, 1.0).unwrap();
    assert!((got - each / 16.0).abs() < 1e-12);
}

#[test]
fn loss_gradient_matches_finite_differences() {
    // the median bandwidth moves with the batch, so differentiate with a fixed set
    let ens = EnsembleSpec::paired(1, 2).build().unwrap();
    for s in 0..5u64 {
        let mut rng = keyed_rng(s, "loss-fd");
        let real = normal_tensor(&mut rng, &[6, 2]);
        let gen = normal_tensor(&mut rng, &[5, 2]);
        let r = finite_difference_check(
            |g, v| Ok(embedding_loss_graph(g, &real, v, &ens, &fixed_bw(), 10.0).unwrap()),
            &gen,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "seed {s}: {}", r.max_rel_error);
    }
}

#[test]
fn gradient_splits_into_alignment_and_diversity() {
    let ens = EnsembleSpec::paired(1, 6).build().unwrap();
    let mut rng = keyed_rng(6, "parts");
    let real = normal_tensor(&mut rng, &[8, 2]);
    let gen = normal_tensor(&mut rng, &[8, 2]);
    let bw = fixed_bw();
    let parts = embedding_gradient_parts(&real, &gen, &ens, &bw, 10.0).unwrap();
    let sum = parts.alignment.zip_map(&parts.diversity, |a, b| a + b).unwrap();
    let scale = parts.total.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(sum.max_abs_diff(&parts.total) <= 1e-12 * scale);

    // diversity alone: numeric gradient of the generated/generated kernel mean
    let self_term = |x: &Tensor| -> diffgraph::Result<f64> {
        let Bandwidths::Fixed(set) = &bw else { unreachable!() };
        let mut acc = 0.0;
        for net in ens.networks() {
            let e = net.embed(x).unwrap();
            let n = e.rows();
            for &s in set.sigmas() {
                let mut k = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        let d2: f64 = e.row(i).iter().zip(e.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
                        k += (-d2 / (2.0 * s * s)).exp();
                    }
                }
                acc += k / (n * n) as f64 / set.sigmas().len() as f64;
            }
        }
        Ok(10.0 * acc / ens.len() as f64)
    };
    let numeric = numeric_gradient(self_term, &gen, 1e-5).unwrap();
    let scale = numeric.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(parts.diversity.max_abs_diff(&numeric) < 1e-6 * scale.max(1e-12));

    // freezing the cross block removes the pull towards real data
    let moved = real.map(|v| v + 3.0);
    let far = embedding_gradient_parts(&moved, &gen, &ens, &bw, 10.0).unwrap();
    assert!(far.diversity.max_abs_diff(&parts.diversity) < 1e-12 * scale.max(1e-12));
}

#[test]
fn only_generated_batch_receives_gradient() {
    let ens = EnsembleSpec::paired(1, 1).build().unwrap();
    for net in ens.networks() {
        assert!(net.params().iter().all(|(_, p)| !p.trainable));
    }
    let mut rng = keyed_rng(1, "roles");
    let real = normal_tensor(&mut rng, &[4, 2]);
    let gen = normal_tensor(&mut rng, &[4, 2]);
    let mut g = Graph::new();
    let x = g.input(gen);
    let l = embedding_loss_graph(&mut g, &real, x, &ens, &Bandwidths::default(), 1.0).unwrap();
    assert!(g.requires_grad(l));
    let grads = g.backward(l).unwrap();
    assert!(grads.get(x).is_some());
}

#[test]
fn ensemble_layouts_have_expected_members() {
    let p = EnsembleSpec::paired(2, 0).build().unwrap();
    assert_eq!(p.len(), 8);
    assert_eq!(p.nets_per_type(), 2);
    for (k, net) in p.networks().iter().enumerate() {
        assert_eq!(net.arch(), EmbedArch::ALL[k / 2]);
        assert_eq!(net.init(), InitScheme::ALL[k / 2]);
    }
    let grid = EnsembleSpec::full_grid(0).build().unwrap();
    let mut pairs: Vec<_> = grid.networks().iter().map(|n| (n.arch().name(), n.init())).collect();
    pairs.dedup();
    assert_eq!(pairs.len(), 16);
}
