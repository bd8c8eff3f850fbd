//! End-to-end acceptance suite. Each numbered check prints a single
//! PASS/FAIL line; the test fails if any check fails. Run with
//! `cargo test --test acceptance -- --nocapture` to see the lines.

use std::collections::BTreeMap;

use rand::Rng;

use adafuse_core::data::{
    generate_text_report, plco_transform, ClinicalRaw, PatientRecord, Race, SmokingStatus,
};
use adafuse_core::eval::{auc, bootstrap_ci, delong_test, policy_report};
use adafuse_core::experiment::{
    build_assembly, demo, nlst_like, quickstart, stage_evaluate, stage_generate,
    stage_train_adafuse, stage_train_baselines, Artifacts,
};
use adafuse_core::fusion::FusionType;
use adafuse_core::modality::{Modality, ModalitySet};
use adafuse_core::models::{all_combos, Classifier, ComboId, Encoder, MoeGate};
use adafuse_core::numerics::gradcheck::grad_check;
use adafuse_core::numerics::tape::Tape;
use adafuse_core::numerics::ParamStore;
use adafuse_core::policy::{
    all_action_sequences, enumerate_trajectories, forced_trajectory, sample_trajectory, PolicyNet,
};
use adafuse_core::rl::{greedy_eval, FreezeConfig, LossConfig};
use adafuse_core::rng::substream;
use adafuse_core::checkpoint::{load_into_prefix, ModelKind};
use adafuse_core::data::read_dataset;

type Check = std::result::Result<String, String>;

fn random_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn random_record(seed: u64) -> PatientRecord {
    let mut rng = substream(seed, "acceptance-record");
    PatientRecord {
        id: format!("acc-{seed}"),
        label: 1,
        f_a: random_vec(&mut rng, 512),
        f_b: random_vec(&mut rng, 17),
        f_c: random_vec(&mut rng, 768),
    }
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness across every network family.
// ---------------------------------------------------------------------------

fn check_gradients() -> Check {
    let mut worst: (f64, &str) = (0.0, "none");
    let track = |family: &'static str, rel: f64, worst: &mut (f64, &str)| {
        if rel > worst.0 {
            *worst = (rel, family);
        }
    };

    // Encoders (both a small- and a wide-input instance).
    for (family, modality) in [("encoder-b", Modality::B), ("encoder-a", Modality::A)] {
        let mut store = ParamStore::new();
        let mut rng = substream(11, family);
        let enc = Encoder::new(&mut store, modality, &mut rng);
        let x = random_vec(&mut substream(12, family), modality.raw_dim());
        let probe = random_vec(&mut substream(13, family), 32);
        let forward = |store: &ParamStore| -> f64 {
            let mut tape = Tape::new();
            let h = enc.encode(&mut tape, store, &x).unwrap();
            let s = tape.dot_const(h, probe.clone());
            tape.scalar(s)
        };
        store.zero_grads();
        {
            let mut tape = Tape::new();
            let h = enc.encode(&mut tape, &store, &x).unwrap();
            let s = tape.dot_const(h, probe.clone());
            tape.backward(s, &mut store, 1.0).unwrap();
        }
        let rel = grad_check(&mut store, forward, 1e-5);
        track(family, rel, &mut worst);
    }

    // One classifier per fusion type (single pass-through, concat, mean, and
    // tensor at its (16+1)^2 = 289-dim fused input).
    let ab = ModalitySet::single(Modality::A).with(Modality::B);
    let classifier_cases = [
        ("classifier-single", ComboId::new(ModalitySet::single(Modality::A), None).unwrap()),
        ("classifier-concat", ComboId::new(ab, Some(FusionType::Concat)).unwrap()),
        ("classifier-mean", ComboId::new(ab, Some(FusionType::Mean)).unwrap()),
        ("classifier-tensor", ComboId::new(ab, Some(FusionType::Tensor)).unwrap()),
    ];
    for (family, combo) in classifier_cases {
        let mut store = ParamStore::new();
        let mut rng = substream(21, family);
        let clf = Classifier::new(&mut store, combo, &mut rng);
        let h: Vec<Vec<f64>> = (0..combo.subset.len())
            .map(|i| random_vec(&mut substream(22 + i as u64, family), 32))
            .collect();
        let forward = |store: &ParamStore| -> f64 {
            let mut tape = Tape::new();
            let nodes: Vec<_> = h.iter().map(|v| tape.leaf(v.clone())).collect();
            let mut noop = substream(0, "noop");
            let logits = clf.forward(&mut tape, store, &nodes, false, &mut noop).unwrap();
            let p = tape.prob_positive(logits);
            let l = tape.bce_from_prob(p, 1);
            tape.scalar(l)
        };
        store.zero_grads();
        {
            let mut tape = Tape::new();
            let nodes: Vec<_> = h.iter().map(|v| tape.leaf(v.clone())).collect();
            let mut noop = substream(0, "noop");
            let logits = clf.forward(&mut tape, &store, &nodes, false, &mut noop).unwrap();
            let p = tape.prob_positive(logits);
            let l = tape.bce_from_prob(p, 1);
            tape.backward(l, &mut store, 1.0).unwrap();
        }
        let rel = grad_check(&mut store, forward, 1e-5);
        track(family, rel, &mut worst);
    }

    // State encoder plus all three policy heads: sum of one chosen log-prob
    // and the entropy at each step.
    {
        let mut store = ParamStore::new();
        let policy = PolicyNet::new(&mut store, &mut substream(31, "policy"));
        // Evaluate at a generic parameter point: the trainer's init zeroes
        // biases (putting step-1 relu pre-activations exactly on the kink,
        // where central differences are one-sided) and heavily damps the
        // state-conditioned weights (shrinking pre-activations toward the
        // kink and gradients toward finite-difference noise). Jitter every
        // parameter before differentiating.
        let mut jitter = substream(33, "policy");
        for layer in &mut store.layers {
            for w in layer.w.data.iter_mut().chain(&mut layer.b) {
                *w += 0.2 * (jitter.gen::<f64>() - 0.5);
            }
        }
        let h_vals: Vec<Vec<f64>> = (0..3).map(|i| random_vec(&mut substream(32 + i, "policy"), 32)).collect();
        let forward = |store: &ParamStore| -> f64 {
            let mut tape = Tape::new();
            let h_nodes: Vec<_> = h_vals.iter().map(|v| tape.leaf(v.clone())).collect();
            let masks = [
                ModalitySet::empty(),
                ModalitySet::single(Modality::A),
                ModalitySet::single(Modality::A).with(Modality::B),
            ];
            let mut terms = Vec::new();
            for (step, mask) in masks.iter().enumerate() {
                let h = [
                    mask.contains(Modality::A).then_some(h_nodes[0]),
                    mask.contains(Modality::B).then_some(h_nodes[1]),
                    mask.contains(Modality::C).then_some(h_nodes[2]),
                ];
                let state = policy.compute_state(&mut tape, store, &h, *mask).unwrap();
                let (logits, valid) = policy.head_logits(&mut tape, store, step + 1, state, *mask).unwrap();
                let lp = tape.log_softmax_tau_masked(logits, 0.9, &valid).unwrap();
                let chosen = tape.index(lp, if step == 1 { 3 } else { 0 });
                let ent = tape.entropy_masked(logits, 0.9, &valid).unwrap();
                terms.push((chosen, 1.0));
                terms.push((ent, 0.5));
            }
            let root = tape.add_weighted(&terms);
            tape.scalar(root)
        };
        store.zero_grads();
        {
            // Same graph as `forward`, re-traced so we can call backward.
            let mut tape = Tape::new();
            let h_nodes: Vec<_> = h_vals.iter().map(|v| tape.leaf(v.clone())).collect();
            let masks = [
                ModalitySet::empty(),
                ModalitySet::single(Modality::A),
                ModalitySet::single(Modality::A).with(Modality::B),
            ];
            let mut terms = Vec::new();
            for (step, mask) in masks.iter().enumerate() {
                let h = [
                    mask.contains(Modality::A).then_some(h_nodes[0]),
                    mask.contains(Modality::B).then_some(h_nodes[1]),
                    mask.contains(Modality::C).then_some(h_nodes[2]),
                ];
                let state = policy.compute_state(&mut tape, &store, &h, *mask).unwrap();
                let (logits, valid) = policy.head_logits(&mut tape, &store, step + 1, state, *mask).unwrap();
                let lp = tape.log_softmax_tau_masked(logits, 0.9, &valid).unwrap();
                let chosen = tape.index(lp, if step == 1 { 3 } else { 0 });
                let ent = tape.entropy_masked(logits, 0.9, &valid).unwrap();
                terms.push((chosen, 1.0));
                terms.push((ent, 0.5));
            }
            let root = tape.add_weighted(&terms);
            tape.backward(root, &mut store, 1.0).unwrap();
        }
        let rel = grad_check(&mut store, forward, 1e-5);
        track("policy", rel, &mut worst);
    }

    // Mixture gate: softmax weights over fixed expert probabilities.
    {
        let mut store = ParamStore::new();
        let gate = MoeGate::new(&mut store, &mut substream(41, "gate"));
        let x = random_vec(&mut substream(42, "gate"), 96);
        let experts: Vec<f64> = (0..15).map(|i| 0.05 + 0.06 * i as f64).collect();
        let forward = |store: &ParamStore| -> f64 {
            let mut tape = Tape::new();
            let xin = tape.leaf(x.clone());
            let g = tape.affine(store, gate.l1, xin).unwrap();
            let g = tape.relu(g);
            let g = tape.affine(store, gate.l2, g).unwrap();
            let g = tape.relu(g);
            let logits = tape.affine(store, gate.l3, g).unwrap();
            let w = tape.softmax_tau(logits, 1.0).unwrap();
            let p = tape.dot_const(w, experts.clone());
            let l = tape.bce_from_prob(p, 1);
            tape.scalar(l)
        };
        store.zero_grads();
        {
            let mut tape = Tape::new();
            let xin = tape.leaf(x.clone());
            let g = tape.affine(&store, gate.l1, xin).unwrap();
            let g = tape.relu(g);
            let g = tape.affine(&store, gate.l2, g).unwrap();
            let g = tape.relu(g);
            let logits = tape.affine(&store, gate.l3, g).unwrap();
            let w = tape.softmax_tau(logits, 1.0).unwrap();
            let p = tape.dot_const(w, experts.clone());
            let l = tape.bce_from_prob(p, 1);
            tape.backward(l, &mut store, 1.0).unwrap();
        }
        let rel = grad_check(&mut store, forward, 1e-5);
        track("moe-gate", rel, &mut worst);
    }

    if worst.0 < 1e-4 {
        Ok(format!("max relative error {:.2e} ({})", worst.0, worst.1))
    } else {
        Err(format!("relative error {:.2e} in {} >= 1e-4", worst.0, worst.1))
    }
}

// ---------------------------------------------------------------------------
// 2. Score-function gradient against finite differences of the exact
//    trajectory-enumerated objective.
// ---------------------------------------------------------------------------

fn check_reinforce_oracle() -> Check {
    let mut asm = build_assembly(5);
    let record = random_record(5);
    // Frozen classifiers: fixed per-combo rewards, distinct enough that the
    // objective is sensitive to every head.
    let reward = |c: ComboId| -> f64 {
        let i = all_combos().iter().position(|x| *x == c).unwrap();
        ((i + 1) as f64 * 0.83).sin()
    };
    let tau = 1.0;

    let objective = |store: &ParamStore| -> f64 {
        enumerate_trajectories(store, &asm.bank, &asm.policy, &record, tau)
            .unwrap()
            .iter()
            .map(|(t, p)| p * reward(t.combo))
            .sum()
    };

    // Analytic gradient: sum over trajectories of r(tau') pi(tau') grad log pi.
    asm.store.zero_grads();
    for seq in all_action_sequences() {
        let mut tape = Tape::new();
        let ep =
            forced_trajectory(&mut tape, &asm.store, &asm.bank, &asm.policy, &record, tau, &seq)
                .unwrap();
        let terms: Vec<_> = ep.log_prob_nodes.iter().map(|n| (*n, 1.0)).collect();
        let root = tape.add_weighted(&terms);
        let weight = ep.trajectory.log_prob.exp() * reward(ep.trajectory.combo);
        tape.backward(root, &mut asm.store, weight).unwrap();
    }

    // Finite differences over a spread of policy parameters.
    let policy_layers = [
        asm.policy.state_l1,
        asm.policy.state_l2,
        asm.policy.heads[0],
        asm.policy.heads[1],
        asm.policy.heads[2],
    ];
    let mut probe_rng = substream(6, "fd-probe");
    let eps = 1e-5;
    let mut max_err = 0.0f64;
    for lid in policy_layers {
        let li = lid.0;
        let nw = asm.store.layers[li].w.data.len();
        let nb = asm.store.layers[li].b.len();
        for _ in 0..12 {
            let pi = probe_rng.gen_range(0..nw + nb);
            let read = |s: &ParamStore| {
                if pi < nw { s.layers[li].w.data[pi] } else { s.layers[li].b[pi - nw] }
            };
            let orig = read(&asm.store);
            let write = |s: &mut ParamStore, v: f64| {
                if pi < nw { s.layers[li].w.data[pi] = v } else { s.layers[li].b[pi - nw] = v }
            };
            write(&mut asm.store, orig + eps);
            let jp = objective(&asm.store);
            write(&mut asm.store, orig - eps);
            let jm = objective(&asm.store);
            write(&mut asm.store, orig);
            let fd = (jp - jm) / (2.0 * eps);
            let analytic = if pi < nw {
                asm.store.layers[li].gw.data[pi]
            } else {
                asm.store.layers[li].gb[pi - nw]
            };
            max_err = max_err.max((fd - analytic).abs());
        }
    }
    if max_err <= 1e-6 {
        Ok(format!("max |analytic - fd| = {max_err:.2e} over 60 parameters"))
    } else {
        Err(format!("max |analytic - fd| = {max_err:.2e} > 1e-6"))
    }
}

// ---------------------------------------------------------------------------
// 3. Sampled episode frequencies match enumerated probabilities.
// ---------------------------------------------------------------------------

fn check_sampling_consistency() -> Check {
    let asm = build_assembly(9);
    let record = random_record(9);
    let tau = 1.0;
    let exact: BTreeMap<String, f64> =
        enumerate_trajectories(&asm.store, &asm.bank, &asm.policy, &record, tau)
            .unwrap()
            .into_iter()
            .fold(BTreeMap::new(), |mut m, (t, p)| {
                *m.entry(t.combo.label()).or_insert(0.0) += p;
                m
            });
    let n = 100_000usize;
    let mut rng = substream(9, "episode-sampling");
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for _ in 0..n {
        let mut tape = Tape::new();
        let ep = sample_trajectory(
            &mut tape, &asm.store, &asm.bank, &asm.policy, &record, tau, &mut rng,
        )
        .unwrap();
        *counts.entry(ep.trajectory.combo.label()).or_insert(0) += 1;
    }
    let mut tv = 0.0;
    for combo in all_combos() {
        let label = combo.label();
        let emp = *counts.get(&label).unwrap_or(&0) as f64 / n as f64;
        let ex = *exact.get(&label).unwrap_or(&0.0);
        tv += 0.5 * (emp - ex).abs();
    }
    if tv < 0.01 {
        Ok(format!("total variation {tv:.4} over {n} episodes"))
    } else {
        Err(format!("total variation {tv:.4} >= 0.01"))
    }
}

// ---------------------------------------------------------------------------
// 4. Clinical transform worked examples and report templates.
// ---------------------------------------------------------------------------

fn check_clinical_pipeline() -> Check {
    let mut failures = Vec::new();
    let scalar = |name: &str, got: f64, want: f64, tol: f64, f: &mut Vec<String>| {
        if (got - want).abs() > tol {
            f.push(format!("{name}: got {got}, want {want}"));
        }
    };

    let case1 = ClinicalRaw {
        age: 68.0,
        race: Race::Asian,
        education: 3.0,
        bmi: 27.46,
        copd: false,
        phist: false,
        fhist: false,
        smoking_status: SmokingStatus::Current,
        intensity: 30.0,
        duration: 58.0,
        quit_time: 0.0,
    };
    let t1 = plco_transform(&case1).unwrap();
    scalar("c1.age", t1[0], 6.0, 0.0, &mut failures);
    scalar("c1.edu", t1[8], -1.0, 0.0, &mut failures);
    scalar("c1.bmi", t1[9], 0.46, 1e-12, &mut failures);
    scalar("c1.copd", t1[10], 0.0, 0.0, &mut failures);
    scalar("c1.phist", t1[11], 0.0, 0.0, &mut failures);
    scalar("c1.fhist", t1[12], 0.0, 0.0, &mut failures);
    scalar("c1.status", t1[13], 0.0, 0.0, &mut failures);
    scalar("c1.intensity", t1[14], -0.069, 5e-4, &mut failures);
    scalar("c1.duration", t1[15], 31.0, 0.0, &mut failures);
    scalar("c1.quit", t1[16], -10.0, 0.0, &mut failures);
    if t1[1..8] != [0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0] {
        failures.push(format!("c1 race one-hot {:?}", &t1[1..8]));
    }

    let case2 = ClinicalRaw {
        age: 65.0,
        race: Race::White,
        education: 3.0,
        bmi: 34.67,
        copd: false,
        phist: false,
        fhist: false,
        smoking_status: SmokingStatus::Former,
        intensity: 40.0,
        duration: 41.0,
        quit_time: 10.0,
    };
    let t2 = plco_transform(&case2).unwrap();
    scalar("c2.age", t2[0], 3.0, 0.0, &mut failures);
    scalar("c2.edu", t2[8], -1.0, 0.0, &mut failures);
    scalar("c2.bmi", t2[9], 7.67, 1e-12, &mut failures);
    scalar("c2.copd", t2[10], 0.0, 0.0, &mut failures);
    scalar("c2.phist", t2[11], 0.0, 0.0, &mut failures);
    scalar("c2.fhist", t2[12], 0.0, 0.0, &mut failures);
    scalar("c2.status", t2[13], -1.0, 0.0, &mut failures);
    scalar("c2.intensity", t2[14], -0.152, 5e-4, &mut failures);
    scalar("c2.duration", t2[15], 14.0, 0.0, &mut failures);
    scalar("c2.quit", t2[16], 0.0, 0.0, &mut failures);
    if t2[1..8] != [0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0] {
        failures.push(format!("c2 race one-hot {:?}", &t2[1..8]));
    }

    let mut flags1 = [false; 13];
    flags1[11] = true;
    flags1[12] = true;
    let want1 = "The patient reports no significant occupational exposures. \
                 No significant chronic medical conditions reported. \
                 The patient is exposed to secondhand smoke at home and secondhand smoke at workplace.";
    if generate_text_report(&flags1) != want1 {
        failures.push("report case 1 differs".into());
    }
    let mut flags2 = [false; 13];
    flags2[0] = true;
    flags2[3] = true;
    flags2[9] = true;
    flags2[11] = true;
    flags2[12] = true;
    let want2 = "The patient has occupational exposure to asbestos and agricultural dusts. \
                 Medical history is significant for pneumonia. \
                 The patient is exposed to secondhand smoke at home and secondhand smoke at workplace.";
    if generate_text_report(&flags2) != want2 {
        failures.push("report case 2 differs".into());
    }

    if failures.is_empty() {
        Ok("22 scalar, 2 one-hot, and 2 report checks exact".into())
    } else {
        Err(failures.join("; "))
    }
}

// ---------------------------------------------------------------------------
// 5. Statistics oracles.
// ---------------------------------------------------------------------------

fn sample_cov(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / (n - 1.0)
}

fn delong_variance_oracle(sa: &[f64], sb: &[f64], labels: &[u8]) -> f64 {
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
    let psi = |x: f64, y: f64| {
        if y < x {
            1.0
        } else if y == x {
            0.5
        } else {
            0.0
        }
    };
    let place10 = |s: &[f64]| -> Vec<f64> {
        pos.iter()
            .map(|&i| neg.iter().map(|&j| psi(s[i], s[j])).sum::<f64>() / neg.len() as f64)
            .collect()
    };
    let place01 = |s: &[f64]| -> Vec<f64> {
        neg.iter()
            .map(|&j| pos.iter().map(|&i| psi(s[i], s[j])).sum::<f64>() / pos.len() as f64)
            .collect()
    };
    let (a10, b10) = (place10(sa), place10(sb));
    let (a01, b01) = (place01(sa), place01(sb));
    let s10 = sample_cov(&a10, &a10) + sample_cov(&b10, &b10) - 2.0 * sample_cov(&a10, &b10);
    let s01 = sample_cov(&a01, &a01) + sample_cov(&b01, &b01) - 2.0 * sample_cov(&a01, &b01);
    s10 / pos.len() as f64 + s01 / neg.len() as f64
}

fn check_statistics_oracles() -> Check {
    let mut failures = Vec::new();

    // auc against explicit pair enumeration on 20 random instances.
    for case in 0..20 {
        let mut rng = substream(case, "auc-oracle");
        let n = 30;
        let scores: Vec<f64> = (0..n)
            .map(|_| (rng.gen_range(0.0..1.0f64) * 8.0).round() / 8.0)
            .collect();
        let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2) as u8).collect();
        labels[0] = 1;
        labels[1] = 0;
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..n {
            for j in 0..n {
                if labels[i] == 1 && labels[j] == 0 {
                    den += 1.0;
                    num += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        let got = auc(&scores, &labels).unwrap();
        if (got - num / den).abs() > 1e-12 {
            failures.push(format!("auc case {case}: {got} vs {}", num / den));
        }
    }

    // DeLong variance versus the double-loop oracle at n = 20.
    let mut rng = substream(77, "delong-oracle");
    let n = 20;
    let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2) as u8).collect();
    labels[0] = 1;
    labels[1] = 0;
    let sa: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    let sb: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    let res = delong_test(&sa, &sb, &labels).unwrap();
    let oracle = delong_variance_oracle(&sa, &sb, &labels);
    if (res.variance - oracle).abs() > 1e-10 {
        failures.push(format!("delong variance {} vs oracle {}", res.variance, oracle));
    }

    // Identical predictions must give p = 1.
    let same = delong_test(&sa, &sa, &labels).unwrap();
    if same.p_value != 1.0 {
        failures.push(format!("identical predictions gave p = {}", same.p_value));
    }

    // Bootstrap is deterministic under a fixed seed.
    let ci1 = bootstrap_ci(&sa, &labels, 500, 42).unwrap();
    let ci2 = bootstrap_ci(&sa, &labels, 500, 42).unwrap();
    if ci1 != ci2 {
        failures.push(format!("bootstrap not deterministic: {ci1:?} vs {ci2:?}"));
    }

    if failures.is_empty() {
        Ok("auc enumeration x20 exact, DeLong variance within 1e-10, p=1 identical, bootstrap deterministic".into())
    } else {
        Err(failures.join("; "))
    }
}

// ---------------------------------------------------------------------------
// 6 & 7. Benchmark-scenario structure and ablation directions, averaged over
//        three seeds. The trained runs are shared between the two checks.
// ---------------------------------------------------------------------------

struct SeedOutcome {
    adafuse_auc: f64,
    best_single: f64,
    best_triple: f64,
    adafuse_mflops: f64,
    triple_mflops: Vec<(String, f64)>,
    skip: [f64; 3],
    cell_val_auc: Vec<(String, f64)>,
    support_default: usize,
    support_no_entropy: usize,
}

fn adafuse_trajectory_support(
    cfg: &adafuse_core::experiment::ExperimentConfig,
    arts: &Artifacts,
) -> (usize, [f64; 3]) {
    let mut asm = build_assembly(cfg.seed);
    load_into_prefix(&arts.adafuse_ckpt(), ModelKind::Adafuse, &mut asm.store).unwrap();
    let test = read_dataset(&arts.test_data()).unwrap();
    let (_preds, trajs) = greedy_eval(&asm.store, &asm.bank, &asm.policy, &test).unwrap();
    let report = policy_report(&trajs);
    (report.support(), report.skip_rates)
}

fn run_benchmark_seed(seed: u64) -> SeedOutcome {
    let dir = tempfile::tempdir().unwrap();
    let arts = Artifacts::new(dir.path());
    let mut cfg = nlst_like(seed);
    cfg.bootstrap_iters = 50; // point estimates only; keep the run fast
    stage_generate(&cfg, &arts).unwrap();
    stage_train_baselines(&cfg, &arts).unwrap();

    let mut cell_val_auc = Vec::new();
    let mut default_eval = None;
    for (i, cell) in FreezeConfig::all_cells().into_iter().enumerate() {
        let val = stage_train_adafuse(&cfg, &arts, &cell, &cfg.loss).unwrap();
        cell_val_auc.push((cell.label(), val));
        if i == 0 {
            let outcomes = stage_evaluate(&cfg, &arts).unwrap();
            let (support, skip) = adafuse_trajectory_support(&cfg, &arts);
            default_eval = Some((outcomes, support, skip));
        }
    }
    let (outcomes, support_default, skip) = default_eval.unwrap();

    let no_entropy = LossConfig {
        lambda_ent: 0.0,
        ..cfg.loss
    };
    stage_train_adafuse(&cfg, &arts, &cfg.freeze, &no_entropy).unwrap();
    let (support_no_entropy, _) = adafuse_trajectory_support(&cfg, &arts);

    let find = |name: &str| outcomes.iter().find(|o| o.row.name == name).unwrap();
    let singles = ["A", "B", "C"];
    let best_single = singles
        .iter()
        .map(|n| find(n).row.auc)
        .fold(f64::NEG_INFINITY, f64::max);
    let triples: Vec<_> = outcomes
        .iter()
        .filter(|o| o.row.name.starts_with("ABC-"))
        .collect();
    let best_triple = triples.iter().map(|o| o.row.auc).fold(f64::NEG_INFINITY, f64::max);
    let ada = find("adafuse");
    SeedOutcome {
        adafuse_auc: ada.row.auc,
        best_single,
        best_triple,
        adafuse_mflops: ada.row.mean_mflops,
        triple_mflops: triples
            .iter()
            .map(|o| (o.row.name.clone(), o.row.mean_mflops))
            .collect(),
        skip,
        cell_val_auc,
        support_default,
        support_no_entropy,
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn check_benchmark_structure(runs: &[SeedOutcome]) -> Check {
    let ada = mean(runs.iter().map(|r| r.adafuse_auc));
    let single = mean(runs.iter().map(|r| r.best_single));
    let triple = mean(runs.iter().map(|r| r.best_triple));
    let skip_a = mean(runs.iter().map(|r| r.skip[0]));
    let skip_b = mean(runs.iter().map(|r| r.skip[1]));
    let skip_c = mean(runs.iter().map(|r| r.skip[2]));
    let ada_flops = mean(runs.iter().map(|r| r.adafuse_mflops));
    let min_triple_flops = runs[0]
        .triple_mflops
        .iter()
        .map(|(_, f)| *f)
        .fold(f64::INFINITY, f64::min);

    let mut failures = Vec::new();
    if ada < single {
        failures.push(format!("adaptive auc {ada:.4} < best single {single:.4}"));
    }
    if ada < triple - 0.01 {
        failures.push(format!("adaptive auc {ada:.4} < best triple {triple:.4} - 0.01"));
    }
    if skip_c <= 0.5 {
        failures.push(format!("noise-modality skip rate {skip_c:.3} <= 0.5"));
    }
    if skip_a >= 0.15 || skip_b >= 0.15 {
        failures.push(format!("informative skip rates A {skip_a:.3} / B {skip_b:.3} >= 0.15"));
    }
    if ada_flops >= min_triple_flops {
        failures.push(format!(
            "adaptive mean {ada_flops:.3} MFLOPs >= cheapest triple {min_triple_flops:.3}"
        ));
    }
    if failures.is_empty() {
        Ok(format!(
            "auc {ada:.4} (single {single:.4}, triple {triple:.4}), skips A {skip_a:.2} B {skip_b:.2} C {skip_c:.2}, {ada_flops:.3} vs triple >= {min_triple_flops:.3} MFLOPs"
        ))
    } else {
        Err(failures.join("; "))
    }
}

fn check_ablation_directions(runs: &[SeedOutcome]) -> Check {
    let n_cells = runs[0].cell_val_auc.len();
    let cell_means: Vec<(String, f64)> = (0..n_cells)
        .map(|i| {
            (
                runs[0].cell_val_auc[i].0.clone(),
                mean(runs.iter().map(|r| r.cell_val_auc[i].1)),
            )
        })
        .collect();
    let default_val = cell_means[0].1;
    let support_default = mean(runs.iter().map(|r| r.support_default as f64));
    let support_no_ent = mean(runs.iter().map(|r| r.support_no_entropy as f64));

    let mut failures = Vec::new();
    for (label, val) in cell_means.iter().skip(1) {
        if default_val < val - 0.005 {
            failures.push(format!(
                "default cell val auc {default_val:.4} < {label} {val:.4} - 0.005"
            ));
        }
    }
    if support_no_ent >= support_default {
        failures.push(format!(
            "support without entropy bonus {support_no_ent:.2} >= default {support_default:.2}"
        ));
    }
    if failures.is_empty() {
        Ok(format!(
            "default cell val auc {default_val:.4} tops the grid; support {support_default:.2} -> {support_no_ent:.2} without entropy"
        ))
    } else {
        Err(failures.join("; "))
    }
}

// ---------------------------------------------------------------------------
// 8. Bit-exact reproducibility of the full pipeline.
// ---------------------------------------------------------------------------

fn check_determinism() -> Check {
    let cfg = demo(7);
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    quickstart(&cfg, d1.path()).unwrap();
    quickstart(&cfg, d2.path()).unwrap();
    let mut compared = 0;
    for entry in std::fs::read_dir(d1.path()).unwrap() {
        let name = entry.unwrap().file_name();
        if std::path::Path::new(&name)
            .extension()
            .is_some_and(|e| e == "csv" || e == "tsv" || e == "jsonl")
        {
            let a = std::fs::read(d1.path().join(&name)).unwrap();
            let b = std::fs::read(d2.path().join(&name)).unwrap();
            if a != b {
                return Err(format!("{} differs between identical runs", name.to_string_lossy()));
            }
            compared += 1;
        }
    }
    if compared == 0 {
        return Err("no report files produced".into());
    }
    Ok(format!("{compared} report files bit-identical across two runs"))
}

#[test]
fn acceptance_criteria() {
    let mut results: Vec<(&str, Check)> = vec![
        ("1 gradient correctness", check_gradients()),
        ("2 policy-gradient oracle", check_reinforce_oracle()),
        ("3 sampling consistency", check_sampling_consistency()),
        ("4 clinical transform and reports", check_clinical_pipeline()),
        ("5 statistics oracles", check_statistics_oracles()),
    ];

    let runs: Vec<SeedOutcome> = [1u64, 2, 3].iter().map(|&s| run_benchmark_seed(s)).collect();
    results.push(("6 benchmark structure", check_benchmark_structure(&runs)));
    results.push(("7 ablation directions", check_ablation_directions(&runs)));
    results.push(("8 pipeline determinism", check_determinism()));

    let mut failed = false;
    for (name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed = true;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    assert!(!failed, "one or more acceptance checks failed");
}
