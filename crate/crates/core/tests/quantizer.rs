use nuquant::autoencoder::MlpParams;
use nuquant::diagnostics::UsageStats;
use nuquant::embedding::{gen_synthetic, normalize_unit, EmbeddingSet, SyntheticSpec, VectorStats};
use nuquant::quantizer::{
    batch_gradients, kmeans, kmeans_init, quantize_set, restart_dead_codes, rq_assign, rq_loss,
    train, Codebook, CodebookStack, QuantizerModel, TrainConfig, MODEL_VERSION,
};
use nuquant::transform::{
    forward_with_stats, inverse, nuq_loss, TransformKind, TransformParams, TransformSideInfo,
};
use nuquant::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn random_stack(
    rng: &mut ChaCha8Rng,
    levels: usize,
    n: usize,
    dim: usize,
    scale: f64,
) -> CodebookStack {
    let books = (1..=levels)
        .map(|k| {
            let v = (0..n * dim)
                .map(|_| rng.random_range(-scale..scale))
                .collect();
            Codebook::new(k, dim, v).unwrap()
        })
        .collect();
    CodebookStack::new(books).unwrap()
}

/// Every code tuple scored level by level against an exhaustive scan, which
/// also checks the strict lowest-index tie rule.
fn exhaustive_codes(d: &[f64], stack: &CodebookStack) -> Vec<u32> {
    let mut r = d.to_vec();
    let mut out = vec![];
    for book in &stack.books {
        let dists: Vec<f64> = (0..book.n_codes())
            .map(|i| sq(&r, book.codeword(i)))
            .collect();
        let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
        let c = dists.iter().position(|&x| x == min).unwrap();
        for (x, e) in r.iter_mut().zip(book.codeword(c)) {
            *x -= e;
        }
        out.push(c as u32);
    }
    out
}

#[test]
fn assignment_matches_exhaustive_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..20 {
        let levels = rng.random_range(1..=3);
        let n = rng.random_range(2..=4);
        let dim = rng.random_range(1..=3);
        let points = rng.random_range(1..=12);
        let stack = random_stack(&mut rng, levels, n, dim, 1.0);
        for _ in 0..points {
            let d: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            let a = rq_assign(&d, &stack).unwrap();
            assert_eq!(a.codes.codes, exhaustive_codes(&d, &stack));
            assert_eq!(a.codes.levels(), levels);
        }
    }
}

#[test]
fn assignment_tie_on_duplicate_codewords() {
    let stack = CodebookStack::new(vec![Codebook::from_rows(
        1,
        &[vec![0.5, 0.5], vec![0.5, 0.5], vec![-1.0, 0.0]],
    )
    .unwrap()])
    .unwrap();
    assert_eq!(rq_assign(&[0.4, 0.6], &stack).unwrap().codes.codes, vec![0]);
}

#[test]
fn reconstruction_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let stack = random_stack(&mut rng, 4, 8, 6, 1.0);
        let d: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
        let a = rq_assign(&d, &stack).unwrap();
        let mut sum = [0.0; 6];
        for (k, &c) in a.codes.codes.iter().enumerate() {
            for (s, e) in sum.iter_mut().zip(stack.books[k].codeword(c as usize)) {
                *s += e;
            }
        }
        let last = a.residuals.last().unwrap();
        for j in 0..6 {
            worst = worst.max((a.d_hat[j] + last[j] - d[j]).abs());
            worst = worst.max((a.d_hat[j] - sum[j]).abs());
        }
    }
    assert!(worst < 1e-12, "worst {worst:e}");
}

fn brute_force_two_means(points: &[Vec<f64>]) -> (f64, Vec<bool>) {
    let m = points.len();
    let mut best = (f64::INFINITY, vec![]);
    for mask in 1u32..(1 << m) - 1 {
        let side: Vec<bool> = (0..m).map(|i| mask >> i & 1 == 1).collect();
        let mut cost = 0.0;
        for group in [true, false] {
            let members: Vec<&Vec<f64>> = points
                .iter()
                .zip(&side)
                .filter(|(_, &s)| s == group)
                .map(|(p, _)| p)
                .collect();
            let dim = members[0].len();
            let mean: Vec<f64> = (0..dim)
                .map(|j| members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64)
                .collect();
            cost += members.iter().map(|p| sq(p, &mean)).sum::<f64>();
        }
        if cost < best.0 {
            best = (cost, side);
        }
    }
    best
}

fn two_blobs() -> Vec<Vec<f64>> {
    vec![
        vec![0.0, 0.1],
        vec![0.2, -0.1],
        vec![-0.1, 0.0],
        vec![0.1, 0.2],
        vec![10.0, 9.8],
        vec![9.9, 10.1],
        vec![10.2, 10.0],
        vec![10.1, 10.3],
    ]
}

#[test]
fn kmeans_two_blobs_is_optimal() {
    let data = two_blobs();
    let (best_cost, best_side) = brute_force_two_means(&data);
    for seed in 0..5 {
        let km = kmeans(&data, 2, 20, seed).unwrap();
        let same = |i: usize, j: usize| km.assignments[i] == km.assignments[j];
        for i in 0..8 {
            for j in 0..8 {
                assert_eq!(same(i, j), best_side[i] == best_side[j]);
            }
        }
        assert!((km.distortion - best_cost).abs() < 1e-12);
        let mut c = km.centroids.clone();
        c.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert!((c[0][0] - 0.05).abs() < 1e-12 && (c[0][1] - 0.05).abs() < 1e-12);
        assert!((c[1][0] - 10.05).abs() < 1e-12 && (c[1][1] - 10.05).abs() < 1e-12);
    }
}

#[test]
fn kmeans_beats_random_subset() {
    let data = gen_synthetic(&SyntheticSpec {
        n_items: 1500,
        dim: 8,
        seed: 5,
        ..Default::default()
    })
    .unwrap();
    let rows: Vec<Vec<f64>> = data.rows_f64().collect();
    let distortion = |cents: &[Vec<f64>]| -> f64 {
        rows.iter()
            .map(|p| cents.iter().map(|c| sq(p, c)).fold(f64::INFINITY, f64::min))
            .sum()
    };
    for seed in 0..10u64 {
        let book = kmeans_init(1, &rows, 32, 20, seed).unwrap();
        let fitted: Vec<Vec<f64>> = (0..32).map(|i| book.codeword(i).to_vec()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let subset: Vec<Vec<f64>> = rand::seq::index::sample(&mut rng, rows.len(), 32)
            .into_iter()
            .map(|i| rows[i].clone())
            .collect();
        assert!(distortion(&fitted) <= distortion(&subset), "seed {seed}");
    }
}

#[test]
fn commitment_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let stack = random_stack(&mut rng, 3, 4, 5, 1.0);
    let mu = 0.25;
    for _ in 0..20 {
        let d: Vec<f64> = (0..5).map(|_| rng.random_range(-1.5..1.5)).collect();
        let a = rq_assign(&d, &stack).unwrap();
        let sel: Vec<&[f64]> = a
            .codes
            .codes
            .iter()
            .enumerate()
            .map(|(k, &c)| stack.books[k].codeword(c as usize))
            .collect();
        let grad = rq_loss(&a.incoming(&d), &sel, mu).input_grad;
        // Commitment term with the codes held fixed.
        let commit = |x: &[f64]| {
            let mut r = x.to_vec();
            let mut total = 0.0;
            for e in &sel {
                total += mu * sq(&r, e);
                for (ri, ei) in r.iter_mut().zip(e.iter()) {
                    *ri -= ei;
                }
            }
            total
        };
        for j in 0..5 {
            let h = 1e-5;
            let mut p = d.clone();
            let mut m = d.clone();
            p[j] += h;
            m[j] -= h;
            let fd = (commit(&p) - commit(&m)) / (2.0 * h);
            assert!(
                (fd - grad[j]).abs() <= 1e-6 * fd.abs().max(1.0),
                "{fd} vs {}",
                grad[j]
            );
        }
    }
}

#[test]
fn outlier_codeword_is_restarted() {
    let data: Vec<Vec<f64>> = (0..40)
        .map(|i| vec![(i % 7) as f64 * 0.1, (i % 5) as f64 * 0.1])
        .collect();
    let mut book = kmeans_init(1, &data, 4, 10, 1).unwrap();
    book.codeword_mut(2).copy_from_slice(&[500.0, -500.0]);
    let mut stack = CodebookStack::new(vec![book]).unwrap();
    let mut counts = vec![0u64; 4];
    for _ in 0..50 {
        for p in &data {
            counts[rq_assign(p, &stack).unwrap().codes.codes[0] as usize] += 1;
        }
    }
    assert_eq!(counts[2], 0);
    let usage = vec![UsageStats::from_counts(0, counts).unwrap()];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(
        restart_dead_codes(&mut stack, &usage, std::slice::from_ref(&data), &mut rng),
        1
    );
    assert!(data
        .iter()
        .any(|p| p.as_slice() == stack.books[0].codeword(2)));
}

fn small_set(seed: u64, n: usize, dim: usize) -> EmbeddingSet {
    gen_synthetic(&SyntheticSpec {
        n_items: n,
        dim,
        seed,
        n_dense_clusters: 3,
        ..Default::default()
    })
    .unwrap()
}

/// Straight-through surrogate of the training objective: codes and the
/// quantization offsets `d̂ - d` are frozen at the evaluation point, as are
/// the normalization stats.
struct Surrogate {
    z: Vec<Vec<f64>>,
    stats: Vec<VectorStats>,
    pinned: Vec<Vec<Option<f64>>>,
    offsets: Vec<Vec<f64>>,
    codes: Vec<Vec<u32>>,
    stack: CodebookStack,
    mu: f64,
    lambda: f64,
}

impl Surrogate {
    fn new(
        z: Vec<Vec<f64>>,
        stack: CodebookStack,
        params: &TransformParams,
        mlp: Option<&MlpParams>,
        mu: f64,
        lambda: f64,
    ) -> Self {
        let mut stats = vec![];
        let mut pinned = vec![];
        let mut offsets = vec![];
        let mut codes = vec![];
        for zi in &z {
            let h = mlp.map_or(zi.clone(), |m| m.encode(zi).unwrap());
            let st = nuquant::embedding::vector_stats(&h).unwrap();
            let (d, _) = forward_with_stats(&h, &st, params).unwrap();
            pinned.push(
                normalize_unit(&h, &st)
                    .0
                    .into_iter()
                    .map(|u| (u == 0.0 || u == 1.0).then_some(u))
                    .collect(),
            );
            let a = rq_assign(&d, &stack).unwrap();
            offsets.push(a.d_hat.iter().zip(&d).map(|(x, y)| x - y).collect());
            codes.push(a.codes.codes);
            stats.push(st);
        }
        Self {
            z,
            stats,
            pinned,
            offsets,
            codes,
            stack,
            mu,
            lambda,
        }
    }

    fn eval(&self, params: &TransformParams, mlp: Option<&MlpParams>) -> f64 {
        let mut total = 0.0;
        for i in 0..self.z.len() {
            let h = mlp.map_or(self.z[i].clone(), |m| m.encode(&self.z[i]).unwrap());
            let st = self.stats[i];
            // The coordinates holding the min and max stay pinned at 0 and 1.
            let d: Vec<f64> = h
                .iter()
                .zip(&self.pinned[i])
                .enumerate()
                .map(|(j, (&x, pin))| {
                    params.apply_unit(pin.unwrap_or((x - st.x_min) / st.delta), j)
                })
                .collect();
            let side = TransformSideInfo {
                stats: st,
                degenerate: false,
            };
            let d_hat: Vec<f64> = d.iter().zip(&self.offsets[i]).map(|(a, b)| a + b).collect();
            let h_hat = inverse(&d_hat, &side, params).unwrap();
            let z_hat = mlp.map_or(h_hat.clone(), |m| m.decode(&h_hat).unwrap());
            total += sq(&self.z[i], &z_hat);
            let mut r = d.clone();
            for (k, &c) in self.codes[i].iter().enumerate() {
                let e = self.stack.books[k].codeword(c as usize);
                total += self.mu * sq(&r, e);
                for (ri, ei) in r.iter_mut().zip(e) {
                    *ri -= ei;
                }
            }
            // The consistency term regularizes the transform only.
            if mlp.is_none() {
                total += self.lambda * nuq_loss(&h, params).unwrap();
            }
        }
        total / self.z.len() as f64
    }
}

fn check(fd: f64, an: f64, what: &str) {
    let scale = fd.abs().max(an.abs()).max(1e-6);
    assert!(
        (fd - an).abs() <= 1e-4 * scale,
        "{what}: fd {fd:e} vs analytic {an:e}"
    );
}

fn transform_gradient_case(params: TransformParams) {
    let data = small_set(2, 60, 6);
    let rows: Vec<Vec<f64>> = data.rows_f64().collect();
    let cfg = TrainConfig {
        levels: 2,
        codebook_size: 5,
        transform: params.kind,
        ..Default::default()
    };
    let d: Vec<Vec<f64>> = rows
        .iter()
        .map(|h| nuquant::transform::forward(h, &params).unwrap().0)
        .collect();
    let mut books = vec![kmeans_init(1, &d, 5, 10, 0).unwrap()];
    let res: Vec<Vec<f64>> = d
        .iter()
        .map(|x| {
            rq_assign(x, &CodebookStack::new(books.clone()).unwrap())
                .unwrap()
                .residuals[0]
                .clone()
        })
        .collect();
    books.push(kmeans_init(2, &res, 5, 10, 1).unwrap());
    let stack = CodebookStack::new(books).unwrap();

    let batch: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    let g = batch_gradients(&batch, &cfg, &stack, &params, None).unwrap();
    let sur = Surrogate::new(
        rows.clone(),
        stack.clone(),
        &params,
        None,
        cfg.mu,
        cfg.lambda_nuq,
    );
    let analytic = g.transform.trainable(params.kind).unwrap();
    #[allow(clippy::needless_range_loop)]
    for which in 0..2 {
        for slot in 0..params.width() {
            let h = 1e-6;
            let mut p = params.clone();
            let mut m = params.clone();
            p.trainable_mut().unwrap()[which][slot] += h;
            m.trainable_mut().unwrap()[which][slot] -= h;
            let fd = (sur.eval(&p, None) - sur.eval(&m, None)) / (2.0 * h);
            check(
                fd,
                analytic[which][slot],
                &format!("{:?} param {which} slot {slot}", params.kind),
            );
        }
    }
    let value = sur.eval(&params, None);
    let reported = (g.loss.recon + g.loss.rq + cfg.lambda_nuq * g.loss.nuq) / rows.len() as f64;
    // The surrogate omits the codebook half of the quantization loss.
    let codebook_half = g.loss.rq / (1.0 + cfg.mu) / rows.len() as f64;
    assert!((value + codebook_half - reported).abs() < 1e-9 * reported.max(1.0));
}

#[test]
fn transform_gradients_through_the_pipeline() {
    transform_gradient_case(TransformParams::kumaraswamy(1.3, 0.8));
    transform_gradient_case(TransformParams::scaled_logistic(2.5, 0.4));
    let mut per_dim = TransformParams::per_dimension(TransformKind::Kumaraswamy, 6);
    for j in 0..6 {
        per_dim.log_a[j] = 0.1 * j as f64 - 0.2;
        per_dim.log_b[j] = 0.3 - 0.05 * j as f64;
    }
    transform_gradient_case(per_dim);
}

#[test]
fn autoencoder_gradients_through_the_pipeline() {
    let data = small_set(4, 40, 6);
    let rows: Vec<Vec<f64>> = data.rows_f64().collect();
    let mlp = MlpParams::new(6, &[10, 8], 4, 3);
    let params = TransformParams::kumaraswamy(1.4, 1.1);
    let cfg = TrainConfig {
        levels: 2,
        codebook_size: 4,
        latent_dim: 4,
        use_autoencoder: true,
        hidden: vec![10, 8],
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let stack = random_stack(&mut rng, 2, 4, 4, 0.5);
    let batch: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    let g = batch_gradients(&batch, &cfg, &stack, &params, Some(&mlp)).unwrap();
    let sur = Surrogate::new(
        rows.clone(),
        stack,
        &params,
        Some(&mlp),
        cfg.mu,
        cfg.lambda_nuq,
    );
    let enc = g.encoder.unwrap();
    let dec = g.decoder.unwrap();
    let mut checked = 0;
    for (net, grads) in [(0usize, &enc), (1, &dec)] {
        for l in 0..3 {
            let shape = grads.weights[l].dim();
            for _ in 0..20 {
                let (i, j) = (rng.random_range(0..shape.0), rng.random_range(0..shape.1));
                let h = 1e-5;
                let bump = |delta: f64| {
                    let mut m = mlp.clone();
                    let layer = if net == 0 {
                        &mut m.encoder.layers[l]
                    } else {
                        &mut m.decoder.layers[l]
                    };
                    layer.weights[[i, j]] += delta;
                    sur.eval(&params, Some(&m))
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                let an = grads.weights[l][[i, j]];
                if an.abs() < 1e-9 && fd.abs() < 1e-7 {
                    continue;
                }
                check(fd, an, &format!("net {net} layer {l} w[{i},{j}]"));
                checked += 1;
            }
        }
    }
    assert!(checked >= 60, "only {checked} informative coordinates");
}

#[test]
fn exact_cover_training() {
    let rows: Vec<Vec<f64>> = (0..6)
        .map(|i| {
            let mut v = vec![0.0; 4];
            v[i % 4] = 1.0 + i as f64;
            v[(i + 1) % 4] = -2.0;
            v
        })
        .collect();
    let ids = (0..6).map(|i| format!("p{i}")).collect();
    let data = EmbeddingSet::from_rows(ids, &rows).unwrap();
    let cfg = TrainConfig {
        levels: 1,
        codebook_size: 6,
        transform: TransformKind::Identity,
        epochs: 5,
        batch_size: 6,
        ..Default::default()
    };
    let model = train(&data, &cfg).unwrap();
    for r in &rows {
        let z_hat = model.reconstruct(r).unwrap();
        assert!(sq(r, &z_hat) / 4.0 < 1e-6);
    }
}

#[test]
fn default_training_on_synthetic_data() {
    let data = gen_synthetic(&SyntheticSpec::default()).unwrap();
    let model = train(&data, &TrainConfig::default()).unwrap();
    assert_eq!(model.levels(), 4);
    assert_eq!(model.n_codes(), 256);
    assert_eq!(model.stack.dim, 32);
    assert_eq!(model.version, MODEL_VERSION);
    assert!(model.history.iter().all(|r| r.loss.is_finite()));
    assert_eq!(model.history.len(), 20);
}

#[test]
fn training_is_deterministic() {
    let data = small_set(1, 300, 8);
    for ae in [false, true] {
        let cfg = TrainConfig {
            levels: 2,
            codebook_size: 16,
            latent_dim: 4,
            epochs: 3,
            batch_size: 64,
            hidden: vec![16, 8],
            use_autoencoder: ae,
            dead_restart_interval: 4,
            seed: 21,
            ..Default::default()
        };
        let a = train(&data, &cfg).unwrap().to_json().unwrap();
        let b = train(&data, &cfg).unwrap().to_json().unwrap();
        assert_eq!(a, b);
        let back = QuantizerModel::from_json(&a).unwrap();
        assert_eq!(back.to_json().unwrap(), a);
    }
}

#[test]
fn training_rejects_bad_configs() {
    let data = small_set(1, 50, 4);
    let bad = [
        TrainConfig {
            lambda_nuq: 0.05,
            ..Default::default()
        },
        TrainConfig {
            lambda_nuq: 1.5,
            ..Default::default()
        },
        TrainConfig {
            mu: 0.0,
            ..Default::default()
        },
        TrainConfig {
            codebook_size: 1,
            ..Default::default()
        },
        TrainConfig {
            batch_size: 0,
            ..Default::default()
        },
    ];
    for cfg in bad {
        assert!(
            matches!(train(&data, &cfg), Err(Error::Config(_))),
            "{cfg:?}"
        );
    }
    assert!(matches!(
        train(&data, &TrainConfig::default()),
        Err(Error::NotEnoughPoints {
            needed: 256,
            available: 50
        })
    ));
}

fn example_model() -> QuantizerModel {
    let stack = CodebookStack::new(vec![
        Codebook::from_rows(1, &[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap(),
        Codebook::from_rows(2, &[vec![0.0, 0.0], vec![0.25, 0.0]]).unwrap(),
    ])
    .unwrap();
    QuantizerModel {
        version: MODEL_VERSION.into(),
        config: TrainConfig {
            levels: 2,
            codebook_size: 2,
            latent_dim: 2,
            transform: TransformKind::Identity,
            ..Default::default()
        },
        input_dim: 2,
        transform: TransformParams::identity(),
        stack,
        mlp: None,
        mu: 0.25,
        lambda_nuq: 0.1,
        history: vec![],
    }
}

#[test]
fn quantize_examples() {
    let model = example_model();
    model.validate().unwrap();
    // (0, 1.2) normalizes to (0, 1); the assignment example is reused below.
    let one = EmbeddingSet::from_rows(vec!["x".into()], &[vec![0.0, 1.2]]).unwrap();
    let rows = quantize_set(&one, &model, false).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].sid.codes.len(), 2);
    assert_eq!(rows[0].sid.dedup_suffix, None);

    let a = rq_assign(&[1.2, 0.0], &model.stack).unwrap();
    assert_eq!(a.codes.codes, vec![1, 1]);

    let dup = EmbeddingSet::from_rows(
        vec!["a".into(), "b".into(), "c".into()],
        &[vec![0.3, 0.9], vec![5.0, -1.0], vec![0.3, 0.9]],
    )
    .unwrap();
    let rows = quantize_set(&dup, &model, true).unwrap();
    assert_eq!(rows[0].sid.codes, rows[2].sid.codes);
    assert_eq!(rows[0].sid.dedup_suffix, Some(0));
    assert_eq!(rows[2].sid.dedup_suffix, Some(1));

    let wrong = EmbeddingSet::from_rows(vec!["w".into()], &[vec![1.0, 2.0, 3.0]]).unwrap();
    assert!(matches!(
        quantize_set(&wrong, &model, false),
        Err(Error::DimMismatch { .. })
    ));
}

#[test]
fn model_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let model = example_model();
    model.save(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.contains("\"version\": \"nuq-model/1\""));
    assert!(text.contains("[\n"), "codewords stored as nested arrays");
    assert_eq!(QuantizerModel::load(&path).unwrap(), model);

    let mut bad = model.clone();
    bad.version = "nuq-model/0".into();
    bad.save(&path).unwrap();
    assert!(matches!(QuantizerModel::load(&path), Err(Error::Model(_))));
}
