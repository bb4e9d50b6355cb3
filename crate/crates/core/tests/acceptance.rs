//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::collections::BTreeSet;
use std::time::Instant;

use kcod::cluster::{
    cluster_level_loss, cluster_train, contrastive_from_similarities, count_confident_clusters,
    encode_representations, entropy_regularizer, estimate_k, instance_level_loss, kcc_loss,
    kmeans, predict, ClusterBatchState, ClusterConfig, ClusterMode, KMeansConfig, KccConfig,
};
use kcod::data_io::{gen_blobs, split_ind_ood, Dataset};
use kcod::metrics::{ari, clustering_accuracy, intra_inter_distances, nmi, silhouette};
use kcod::model::EncoderModel;
use kcod::numerics::{finite_diff_grad, l2_normalize, relative_error, softmax, Mat64};
use kcod::pipeline::{run_pipeline, RunConfig, REPORT_FILE};
use kcod::pretrain::{ce_loss, kcl_loss, pretrain, ContrastQueue, KclAnchor, KclConfig, QueueEntry};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

const FD_STEP: f64 = 1e-6;
const GRAD_TOL: f64 = 1e-4;

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    l2_normalize(&(0..d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>()).unwrap()
}

fn prob_rows(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Mat64 {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let logits: Vec<f64> = (0..c).map(|_| rng.random_range(-2.0..2.0)).collect();
            softmax(&logits, 1.0).unwrap()
        })
        .collect();
    Mat64::from_rows(&rows).unwrap()
}

fn batch_state(rng: &mut ChaCha8Rng, n: usize, c: usize, d: usize) -> ClusterBatchState {
    let f = (0..2 * n).map(|_| unit(rng, d)).collect();
    ClusterBatchState::new(f, prob_rows(rng, n, c), prob_rows(rng, n, c)).unwrap()
}

fn chunked(x: &[f64], d: usize) -> Vec<Vec<f64>> {
    x.chunks(d).map(<[f64]>::to_vec).collect()
}

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = [0.0f64; 6];
    const NAMES: [&str; 6] = ["kcl", "clu", "ins", "kcc", "ce", "reg"];
    for trial in 0..20 {
        let n = rng.random_range(2..=8);
        let c = rng.random_range(2..=6);
        let d = rng.random_range(2..=16);
        let tau = rng.random_range(0.2..1.5);

        let classes = rng.random_range(2..=4);
        let mut queue = ContrastQueue::new(32);
        for i in 0..rng.random_range(8..=32) {
            queue.push(QueueEntry {
                feature: unit(&mut rng, d),
                label: i % classes,
                source: 1000 + i,
            });
        }
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let kcl_cfg = KclConfig {
            k: rng.random_range(1..=5),
            temperature: tau,
            ..Default::default()
        };
        let kcl_at = |x: &[f64]| {
            let feats = chunked(x, d);
            let anchors: Vec<KclAnchor> = feats
                .iter()
                .zip(&labels)
                .map(|(f, &l)| KclAnchor { feature: f, label: l, source: None })
                .collect();
            kcl_loss(&anchors, &queue, &kcl_cfg).unwrap()
        };
        let x: Vec<f64> = (0..n).flat_map(|_| unit(&mut rng, d)).collect();
        let numeric = finite_diff_grad(|x| kcl_at(x).loss, &x, FD_STEP).unwrap();
        worst[0] = worst[0].max(relative_error(&kcl_at(&x).grads.concat(), &numeric));

        let s = batch_state(&mut rng, n, c, d);
        let (ga, gb, f) = (s.g_orig().clone(), s.g_aug().clone(), s.features().to_vec());
        let with_g = |x: &[f64]| {
            let (a, b) = x.split_at(n * c);
            ClusterBatchState::new_unvalidated(
                f.clone(),
                Mat64::from_vec(n, c, a.to_vec()).unwrap(),
                Mat64::from_vec(n, c, b.to_vec()).unwrap(),
            )
            .unwrap()
        };
        let with_f = |x: &[f64]| ClusterBatchState::new_unvalidated(chunked(x, d), ga.clone(), gb.clone()).unwrap();
        let g_flat = [ga.as_slice(), gb.as_slice()].concat();
        let f_flat = f.concat();

        let clu = cluster_level_loss(&s, tau).unwrap();
        let numeric = finite_diff_grad(|x| cluster_level_loss(&with_g(x), tau).unwrap().loss, &g_flat, FD_STEP).unwrap();
        let analytic = [clu.grad_orig.as_slice(), clu.grad_aug.as_slice()].concat();
        worst[1] = worst[1].max(relative_error(&analytic, &numeric));

        let ins = instance_level_loss(&s, tau).unwrap();
        let numeric = finite_diff_grad(|x| instance_level_loss(&with_f(x), tau).unwrap().loss, &f_flat, FD_STEP).unwrap();
        worst[2] = worst[2].max(relative_error(&ins.grads.concat(), &numeric));

        let kcc_cfg = KccConfig {
            threshold: rng.random_range(0.2..0.9),
            k_neg: rng.random_range(1..=2 * n - 2),
            temperature: tau,
            ..Default::default()
        };
        let kcc = kcc_loss(&s, &kcc_cfg).unwrap();
        let numeric = finite_diff_grad(|x| kcc_loss(&with_f(x), &kcc_cfg).unwrap().loss, &f_flat, FD_STEP).unwrap();
        worst[3] = worst[3].max(relative_error(&kcc.grads.concat(), &numeric));

        let logits: Vec<f64> = (0..c).map(|_| rng.random_range(-4.0..4.0)).collect();
        let target = trial % c;
        let (_, g) = ce_loss(&logits, target).unwrap();
        let numeric = finite_diff_grad(|x| ce_loss(x, target).unwrap().0, &logits, FD_STEP).unwrap();
        worst[4] = worst[4].max(relative_error(&g, &numeric));

        let (_, rg) = entropy_regularizer(&ga);
        let numeric = finite_diff_grad(
            |x| entropy_regularizer(&Mat64::from_vec(n, c, x.to_vec()).unwrap()).0,
            ga.as_slice(),
            FD_STEP,
        )
        .unwrap();
        worst[5] = worst[5].max(relative_error(rg.as_slice(), &numeric));
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst.iter().all(|&e| e < GRAD_TOL) && secs < 60.0;
    let detail = NAMES
        .iter()
        .zip(worst)
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(pass, format!("max rel err over 20 configs: {detail}; {secs:.2}s"))
}

fn closed_form_gradient() -> Verdict {
    let oracle = |pos: f64, negs: &[f64], tau: f64| {
        let denom = (pos / tau).exp() + negs.iter().map(|s| (s / tau).exp()).sum::<f64>();
        let d_pos = ((pos / tau).exp() / denom - 1.0) / tau;
        let d_negs: Vec<f64> = negs.iter().map(|s| (s / tau).exp() / denom / tau).collect();
        (d_pos, d_negs)
    };
    let mut worst = 0.0f64;
    let g = contrastive_from_similarities(0.9, &[0.5], 0.5);
    let reference = g.d_negatives[0];
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..50 {
        let tau = rng.random_range(0.1..2.0);
        let pos = rng.random_range(-1.0..1.0);
        let negs: Vec<f64> = (0..rng.random_range(1..8)).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = contrastive_from_similarities(pos, &negs, tau);
        let (d_pos, d_negs) = oracle(pos, &negs, tau);
        worst = worst.max((got.d_positive - d_pos).abs());
        for (a, b) in got.d_negatives.iter().zip(&d_negs) {
            worst = worst.max((a - b).abs());
        }
    }
    let (_, ref_negs) = oracle(0.9, &[0.5], 0.5);
    worst = worst.max((reference - ref_negs[0]).abs());
    let pass = worst < 1e-9 && (reference - 0.620051).abs() < 5e-7;
    verdict(pass, format!("(0.9, 0.5, tau 0.5) -> {reference:.9}; max abs err {worst:.1e} over 51 cases"))
}

/// Best partial injective mapping by exhaustive search.
fn brute_force_accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    let p_labels: Vec<usize> = pred.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let t_labels: Vec<usize> = truth.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let count = |p: usize, t: usize| pred.iter().zip(truth).filter(|&(&a, &b)| a == p && b == t).count();
    fn search(i: usize, used: &mut Vec<bool>, p: &[usize], t: &[usize], count: &dyn Fn(usize, usize) -> usize) -> usize {
        if i == p.len() {
            return 0;
        }
        let mut best = search(i + 1, used, p, t, count);
        for j in 0..t.len() {
            if !used[j] {
                used[j] = true;
                best = best.max(count(p[i], t[j]) + search(i + 1, used, p, t, count));
                used[j] = false;
            }
        }
        best
    }
    let mut used = vec![false; t_labels.len()];
    search(0, &mut used, &p_labels, &t_labels, &count) as f64 / pred.len() as f64
}

fn silhouette_oracle(points: &[Vec<f64>], labels: &[usize]) -> f64 {
    let n = points.len();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let clusters: BTreeSet<usize> = labels.iter().copied().collect();
    let mut total = 0.0;
    for i in 0..n {
        let own_size = labels.iter().filter(|&&l| l == labels[i]).count();
        if own_size == 1 {
            continue;
        }
        let mean_to = |c: usize| {
            let mut sum = 0.0;
            let mut m = 0usize;
            for j in 0..n {
                if j != i && labels[j] == c {
                    sum += dist(&points[i], &points[j]);
                    m += 1;
                }
            }
            sum / m as f64
        };
        let a = mean_to(labels[i]);
        let b = clusters
            .iter()
            .filter(|&&c| c != labels[i])
            .map(|&c| mean_to(c))
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        total += if m == 0.0 { 0.0 } else { (b - a) / m };
    }
    total / n as f64
}

fn metric_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut acc_mismatch = 0;
    for _ in 0..200 {
        let n = rng.random_range(1..=40);
        let kp = rng.random_range(1..=6);
        let kt = rng.random_range(1..=6);
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..kp) * 3).collect();
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..kt) + 10).collect();
        if clustering_accuracy(&pred, &truth).unwrap() != brute_force_accuracy(&pred, &truth) {
            acc_mismatch += 1;
        }
    }
    let t = [0, 0, 1, 1];
    let p = [0, 1, 0, 1];
    let (a, m) = (ari(&p, &t).unwrap(), nmi(&p, &t).unwrap());
    let hand = (a + 0.5).abs() < 1e-9 && m.abs() < 1e-9;

    let points: Vec<Vec<f64>> = (0..100)
        .map(|_| (0..5).map(|_| rng.random_range(-3.0..3.0)).collect())
        .collect();
    let labels: Vec<usize> = (0..100).map(|_| rng.random_range(0..4)).collect();
    let sc = silhouette(&points, &labels).unwrap();
    let sc_ref = silhouette_oracle(&points, &labels);
    let pass = acc_mismatch == 0 && hand && sc == sc_ref;
    verdict(
        pass,
        format!("ACC mismatches {acc_mismatch}/200; ARI {a:.3} NMI {m:.3}; SC {sc} vs oracle {sc_ref}"),
    )
}

fn kcl_saturates_to_scl() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let d = rng.random_range(2..=16);
        let tau = rng.random_range(0.2..1.0);
        let classes = rng.random_range(2..=4);
        let mut queue = ContrastQueue::new(40);
        for i in 0..rng.random_range(10..=40) {
            queue.push(QueueEntry { feature: unit(&mut rng, d), label: rng.random_range(0..classes), source: i });
        }
        let feats: Vec<Vec<f64>> = (0..6).map(|_| unit(&mut rng, d)).collect();
        let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..classes)).collect();
        let anchors: Vec<KclAnchor> = feats
            .iter()
            .zip(&labels)
            .map(|(f, &l)| KclAnchor { feature: f, label: l, source: None })
            .collect();
        let population = queue.len();
        let mut scl = 0.0;
        for (f, &l) in feats.iter().zip(&labels) {
            let sim = |e: &QueueEntry| f.iter().zip(&e.feature).map(|(a, b)| a * b).sum::<f64>() / tau;
            let neg: f64 = queue.iter().filter(|e| e.label != l).map(|e| sim(e).exp()).sum();
            let pos: Vec<f64> = queue.iter().filter(|e| e.label == l).map(sim).collect();
            if pos.is_empty() {
                continue;
            }
            scl += pos.iter().map(|&s| -(s.exp() / (s.exp() + neg)).ln()).sum::<f64>() / pos.len() as f64;
        }
        for k in [population, usize::MAX] {
            let cfg = KclConfig { k, temperature: tau, ..Default::default() };
            match kcl_loss(&anchors, &queue, &cfg) {
                Ok(out) => worst = worst.max((out.loss - scl).abs()),
                Err(_) => worst = f64::INFINITY,
            }
        }
    }
    verdict(worst < 1e-9, format!("max |KCL - SCL| over 20 queues: {worst:.1e}"))
}

/// The shared synthetic benchmark: 10 classes of 100 in 16 dims, centres
/// spanning 5 signal dims, half the classes held out.
fn benchmark(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        classes: 10,
        per_class: 100,
        dim: 16,
        center_scale: 8.0,
        noise_sigma: 1.0,
        signal_dims: Some(5),
        nuisance_sigma: Some(4.0),
        ood_ratio: 0.5,
        pretrain_epochs: 10,
        pretrain_batch: 32,
        epochs: 30,
        batch: 64,
        dropout: 0.5,
        ..Default::default()
    }
}

struct Stage1 {
    ind: Dataset,
    ood: Dataset,
    model: EncoderModel,
}

fn stage1(cfg: &RunConfig) -> Stage1 {
    let data = gen_blobs(&cfg.blob_spec()).unwrap();
    let (ind, ood) = split_ind_ood(&data, &cfg.split_spec()).unwrap();
    let dims = cfg.model_dims(ind.dim().unwrap(), ind.classes().len());
    let mut model = EncoderModel::new(dims, cfg.dropout, cfg.seed).unwrap();
    pretrain(&mut model, &ind, &cfg.pretrain_config()).unwrap();
    Stage1 { ind, ood, model }
}

struct Stage2 {
    acc: f64,
    final_sc: Option<f64>,
}

fn stage2(cfg: &RunConfig, s1: &Stage1, mode: ClusterMode) -> Stage2 {
    let c = s1.ood.classes().len();
    let model = s1.model.with_cluster_head(c, cfg.seed).unwrap();
    let ccfg = ClusterConfig { mode, ..cfg.cluster_config() };
    let out = cluster_train(&model, &s1.ood, &ccfg).unwrap();
    let pred = predict(&out.best, &s1.ood, mode, cfg.seed).unwrap();
    Stage2 {
        acc: clustering_accuracy(&pred, &s1.ood.labels()).unwrap(),
        final_sc: out.log.last().and_then(|e| e.sc),
    }
}

fn kmeans_acc(points: &[Vec<f64>], truth: &[usize], seed: u64) -> f64 {
    let k = truth.iter().collect::<BTreeSet<_>>().len();
    let r = kmeans(points, &KMeansConfig::new(k, seed)).unwrap();
    clustering_accuracy(&r.assignments, truth).unwrap()
}

fn raw_inputs(d: &Dataset) -> Vec<Vec<f64>> {
    d.samples.iter().map(|s| s.features.clone()).collect()
}

struct Benchmark {
    seeds: Vec<(Stage1, Stage2, Stage2)>,
    instance_only: Stage2,
    cluster_only: Stage2,
    raw_acc: f64,
    seconds: f64,
}

fn run_benchmark() -> Benchmark {
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let cfg0 = benchmark(0);
    let start = Instant::now();
    let (s1, kcod) = single.install(|| {
        let s1 = stage1(&cfg0);
        let kcod = stage2(&cfg0, &s1, ClusterMode::Kcod);
        (s1, kcod)
    });
    let seconds = start.elapsed().as_secs_f64();
    let raw_acc = kmeans_acc(&raw_inputs(&s1.ood), &s1.ood.labels(), 0);

    let modes = [ClusterMode::KcodWoKcc, ClusterMode::InstanceOnly, ClusterMode::ClusterOnly];
    let mut seed0: Vec<Stage2> = modes.par_iter().map(|&m| stage2(&cfg0, &s1, m)).collect();
    let cluster_only = seed0.pop().unwrap();
    let instance_only = seed0.pop().unwrap();
    let wo_kcc = seed0.pop().unwrap();

    let others: Vec<(Stage1, Stage2, Stage2)> = [1u64, 2]
        .par_iter()
        .map(|&seed| {
            let cfg = benchmark(seed);
            let s1 = stage1(&cfg);
            let kcod = stage2(&cfg, &s1, ClusterMode::Kcod);
            let wo = stage2(&cfg, &s1, ClusterMode::KcodWoKcc);
            (s1, kcod, wo)
        })
        .collect();
    let mut seeds = vec![(s1, kcod, wo_kcc)];
    seeds.extend(others);
    Benchmark {
        seeds,
        instance_only,
        cluster_only,
        raw_acc,
        seconds,
    }
}

fn end_to_end(b: &Benchmark) -> Verdict {
    let acc = b.seeds[0].1.acc;
    let pass = acc >= 0.90 && acc > b.raw_acc && b.seconds < 300.0;
    verdict(
        pass,
        format!("OOD ACC {acc:.3} vs raw k-means {:.3}; pre-train + cluster {:.1}s on one thread", b.raw_acc, b.seconds),
    )
}

fn kcl_keeps_intra_spread(b: &Benchmark) -> Verdict {
    let kcl_run = &b.seeds[0].0;
    let scl_cfg = RunConfig { k_kcl: usize::MAX, ..benchmark(0) };
    let scl_run = stage1(&scl_cfg);
    let probe = |s: &Stage1| {
        let ind_z = encode_representations(&s.model, &s.ind).unwrap();
        let (intra, _) = intra_inter_distances(&ind_z, &s.ind.labels()).unwrap();
        let ood_z = encode_representations(&s.model, &s.ood).unwrap();
        (intra, kmeans_acc(&ood_z, &s.ood.labels(), 0))
    };
    let (kcl_intra, kcl_acc) = probe(kcl_run);
    let (scl_intra, scl_acc) = probe(&scl_run);
    let pass = kcl_intra > scl_intra && kcl_acc >= scl_acc;
    verdict(
        pass,
        format!(
            "IND intra K=3 {kcl_intra:.4} vs all-positive {scl_intra:.4}; OOD k-means ACC {kcl_acc:.3} vs {scl_acc:.3}"
        ),
    )
}

fn kcc_raises_silhouette(b: &Benchmark) -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for (seed, (_, kcod, wo)) in b.seeds.iter().enumerate() {
        let (k, w) = (kcod.final_sc.unwrap_or(f64::NAN), wo.final_sc.unwrap_or(f64::NAN));
        pass &= k >= w;
        parts.push(format!("seed {seed}: {k:.3} vs {w:.3}"));
    }
    verdict(pass, format!("final SC kcod vs kcod_wo_kcc, {}", parts.join("; ")))
}

fn cluster_count_estimate(b: &Benchmark) -> Verdict {
    let hand = count_confident_clusters(&[30, 25, 20, 15, 4, 3, 2, 1, 0, 0], 100);
    let estimates: Vec<usize> = b
        .seeds
        .iter()
        .enumerate()
        .map(|(seed, (s1, _, _))| {
            let z = encode_representations(&s1.model, &s1.ood).unwrap();
            estimate_k(&z, 10, seed as u64).unwrap()
        })
        .collect();
    let pass = hand == 4 && estimates.iter().all(|&k| k == 5);
    verdict(pass, format!("K'=10 estimates on seeds 0..3: {estimates:?}; hand case {hand}"))
}

fn both_heads_needed(b: &Benchmark) -> Verdict {
    let kcod = b.seeds[0].1.acc;
    let (ins, clu) = (b.instance_only.acc, b.cluster_only.acc);
    verdict(
        kcod > ins && kcod > clu,
        format!("OOD ACC kcod {kcod:.3}, instance_only {ins:.3}, cluster_only {clu:.3}"),
    )
}

fn pipeline_determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let cfg = benchmark(11);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let ra = run_pipeline(&cfg, &a).unwrap();
    let rb = run_pipeline(&cfg, &b).unwrap();
    let bytes_a = std::fs::read(a.join(REPORT_FILE)).unwrap();
    let bytes_b = std::fs::read(b.join(REPORT_FILE)).unwrap();
    let same_bits = ra.acc.to_bits() == rb.acc.to_bits()
        && ra.nmi.to_bits() == rb.nmi.to_bits()
        && ra.sc.map(f64::to_bits) == rb.sc.map(f64::to_bits);
    verdict(
        bytes_a == bytes_b && same_bits,
        format!("report.json {} bytes, identical: {}", bytes_a.len(), bytes_a == bytes_b),
    )
}

fn main() {
    let mut results: Vec<(u8, &str, Verdict)> = vec![
        (1, "gradient suite", gradient_suite()),
        (2, "closed-form similarity gradient", closed_form_gradient()),
        (3, "metric oracles", metric_oracles()),
        (4, "KCL saturates to SCL", kcl_saturates_to_scl()),
    ];
    let bench = run_benchmark();
    results.push((5, "end-to-end synthetic benchmark", end_to_end(&bench)));
    results.push((6, "KCL keeps intra-class spread", kcl_keeps_intra_spread(&bench)));
    results.push((7, "KCC raises OOD silhouette", kcc_raises_silhouette(&bench)));
    results.push((8, "cluster-count estimate", cluster_count_estimate(&bench)));
    results.push((9, "both heads needed", both_heads_needed(&bench)));
    results.push((10, "pipeline determinism", pipeline_determinism()));

    let mut failed = 0;
    for (id, name, v) in &results {
        let tag = if v.pass { "PASS" } else { "FAIL" };
        println!("criterion {id:>2} {tag} {name}: {}", v.detail);
        failed += usize::from(!v.pass);
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
