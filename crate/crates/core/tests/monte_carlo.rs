//! Seeded Monte-Carlo properties on the default world.

use nalgebra::DVector;
use revpers::anonymizer::{anonymize_batch, reconstruction_error, recovery_batch};
use revpers::metrics::{evaluate_batch, sweep};
use revpers::world::{default_world, extract_identity, posterior_attribute, posterior_identity, sample_world};
use revpers::{
    attribute_swap, build_schedule, ddpm_invert, sample_with_trajectory, AttributeLabel, AttributeMode, Condition,
    GmmWorld, GuidanceConfig, Guide, IdentityLabel, NoiseSchedule, ScheduleKind, Solver,
};

const N: usize = 500;

fn sched() -> NoiseSchedule {
    build_schedule(100, ScheduleKind::Linear, 1e-4, 0.02).unwrap()
}

fn inputs(w: &GmmWorld, n: usize, seed: u64) -> Vec<DVector<f64>> {
    sample_world(w, n, seed).unwrap().into_iter().map(|p| p.point).collect()
}

#[test]
fn reverse_guidance_changes_identity() {
    let w = default_world();
    let s = sched();
    let x = inputs(&w, N, 1);
    let out = anonymize_batch(&x, &w, &s, &GuidanceConfig::default(), AttributeMode::Uncontrolled, 1).unwrap();
    let changed = out.iter().filter(|a| !a.report.reid).count();
    assert!(changed as f64 >= 0.95 * N as f64, "changed {changed}/{N}");
}

#[test]
fn distance_from_identity_grows_as_scale_drops() {
    let w = default_world();
    let s = sched();
    let x = inputs(&w, N, 2);
    let mut last = -1.0;
    for cfg in [1.0, 0.0, -2.0, -5.0, -10.0] {
        let g = GuidanceConfig::default().with_cfg(cfg);
        let out = anonymize_batch(&x, &w, &s, &g, AttributeMode::Uncontrolled, 2).unwrap();
        let mean = x
            .iter()
            .zip(&out)
            .map(|(xi, a)| (&a.output - &extract_identity(&w, xi).unwrap().identity.unwrap().0).norm())
            .sum::<f64>()
            / N as f64;
        assert!(mean > last, "cfg {cfg}: {mean} <= {last}");
        last = mean;
    }
}

#[test]
fn zero_adapter_scale_disables_anonymization() {
    let w = default_world();
    let s = sched();
    let x = inputs(&w, N, 3);
    let g = GuidanceConfig::default().with_ipa(0.0);
    let out = anonymize_batch(&x, &w, &s, &g, AttributeMode::Keep, 3).unwrap();
    let reid = out.iter().filter(|a| a.report.reid).count() as f64 / N as f64;
    assert!(reid >= 0.9, "reid {reid}");
}

#[test]
fn reconstruction_error_is_within_tolerance_at_every_scale() {
    let w = default_world();
    let s = sched();
    let x = inputs(&w, 50, 4);
    for cfg in [1.0, -10.0] {
        let g = GuidanceConfig::default().with_cfg(cfg);
        let guide = Guide::new(&w, &s, g).unwrap();
        for a in anonymize_batch(&x, &w, &s, &g, AttributeMode::Keep, 4).unwrap() {
            assert!(reconstruction_error(&guide, &a.traj).unwrap() <= 1e-6);
        }
    }
}

#[test]
fn sweep_trends_over_guidance_scale() {
    let w = default_world();
    let s = sched();
    let g = GuidanceConfig::default();
    let grid: Vec<_> = [-5.0, -10.0, -15.0, -20.0].iter().map(|c| g.with_cfg(*c)).collect();
    let recs = sweep(&grid, &w, &s, N, 5, AttributeMode::Uncontrolled).unwrap();
    for pair in recs.windows(2) {
        assert!(pair[1].reid_rate <= pair[0].reid_rate);
        assert!(pair[1].quality >= pair[0].quality);
    }
}

#[test]
fn sweep_trend_over_adapter_scale() {
    let w = default_world();
    let s = sched();
    let g = GuidanceConfig::default();
    let grid: Vec<_> = [0.0, 0.25, 0.5, 0.75, 1.0].iter().map(|l| g.with_ipa(*l)).collect();
    let recs = sweep(&grid, &w, &s, N, 6, AttributeMode::Uncontrolled).unwrap();
    for pair in recs.windows(2) {
        assert!(pair[1].reid_rate <= pair[0].reid_rate);
    }
}

#[test]
fn fresh_samples_score_better_quality_than_strong_guidance() {
    let w = default_world();
    let s = sched();
    let x = inputs(&w, N, 7);
    let g = GuidanceConfig::default().with_cfg(-20.0);
    let fresh = evaluate_batch(&x, &inputs(&w, N, 8), None, &w, &g, 7).unwrap();
    let out: Vec<_> = anonymize_batch(&x, &w, &s, &g, AttributeMode::Uncontrolled, 7)
        .unwrap()
        .into_iter()
        .map(|a| a.output)
        .collect();
    let anon = evaluate_batch(&x, &out, None, &w, &g, 7).unwrap();
    assert!(fresh.quality <= anon.quality);
}

#[test]
fn attribute_swap_selects_new_label_on_manifold() {
    let w = default_world();
    let s = sched();
    for cfg in [0.0, 1.0] {
        let g = GuidanceConfig::default().with_cfg(cfg);
        let mut hits = 0;
        for (i, p) in sample_world(&w, N, 9).unwrap().iter().enumerate() {
            let a = posterior_attribute(&w, &p.point).unwrap().0;
            let other = AttributeLabel(1 - a.0);
            let traj =
                ddpm_invert(&p.point, &w, &s, &Condition::null().with_attribute(Some(a)), g.solver, i as u64).unwrap();
            let id = extract_identity(&w, &p.point).unwrap();
            let out = attribute_swap(&traj, &w, &s, &id, other, &g).unwrap();
            hits += (posterior_attribute(&w, &out).unwrap().0 == other) as usize;
        }
        assert!(hits as f64 >= 0.9 * N as f64, "cfg {cfg}: {hits}/{N}");
    }
}

#[test]
fn double_swap_restores_the_label() {
    let w = default_world();
    let s = sched();
    let g = GuidanceConfig::default().with_cfg(1.0);
    let mut restored = 0;
    for (i, p) in sample_world(&w, N, 10).unwrap().iter().enumerate() {
        let a = posterior_attribute(&w, &p.point).unwrap().0;
        let b = AttributeLabel(1 - a.0);
        let id = extract_identity(&w, &p.point).unwrap();
        let t1 =
            ddpm_invert(&p.point, &w, &s, &Condition::null().with_attribute(Some(a)), g.solver, 2 * i as u64).unwrap();
        let mid = attribute_swap(&t1, &w, &s, &id, b, &g).unwrap();
        let mid_attr = posterior_attribute(&w, &mid).unwrap().0;
        let t2 =
            ddpm_invert(&mid, &w, &s, &Condition::null().with_attribute(Some(mid_attr)), g.solver, 2 * i as u64 + 1)
                .unwrap();
        let back = attribute_swap(&t2, &w, &s, &extract_identity(&w, &mid).unwrap(), a, &g).unwrap();
        restored += (posterior_attribute(&w, &back).unwrap().0 == a) as usize;
    }
    assert!(restored as f64 >= 0.9 * N as f64, "restored {restored}/{N}");
}

#[test]
fn retention_mode_is_no_worse_than_uncontrolled() {
    let w = default_world();
    let s = sched();
    let g = GuidanceConfig::default();
    let keep = sweep(&[g], &w, &s, N, 11, AttributeMode::Keep).unwrap();
    let free = sweep(&[g], &w, &s, N, 11, AttributeMode::Uncontrolled).unwrap();
    assert!(keep[0].attr_accuracy >= free[0].attr_accuracy);
}

#[test]
fn swap_equals_replay_over_many_seeds() {
    let w = default_world();
    let s = sched();
    let g = GuidanceConfig::default();
    for (i, p) in sample_world(&w, 100, 12).unwrap().iter().enumerate() {
        let a = posterior_attribute(&w, &p.point).unwrap().0;
        let traj =
            ddpm_invert(&p.point, &w, &s, &Condition::null().with_attribute(Some(a)), g.solver, i as u64).unwrap();
        let id = extract_identity(&w, &p.point).unwrap();
        let new = AttributeLabel((i % 2) as u32);
        let swapped = attribute_swap(&traj, &w, &s, &id, new, &g).unwrap();
        let direct = sample_with_trajectory(&traj, &w, &s, &id.with_attribute(Some(new)), &g).unwrap();
        assert_eq!(swapped, direct);
    }
}

fn recovery_rates(attack: GuidanceConfig) -> (f64, f64) {
    let w = default_world();
    let s = sched();
    let x = inputs(&w, N, 13);
    let originals: Vec<IdentityLabel> = x.iter().map(|p| posterior_identity(&w, p).unwrap().0).collect();
    let anon = anonymize_batch(&x, &w, &s, &GuidanceConfig::default(), AttributeMode::Uncontrolled, 13).unwrap();
    let anon_rate = anon.iter().filter(|a| a.report.reid).count() as f64 / N as f64;
    let outs: Vec<_> = anon.into_iter().map(|a| a.output).collect();
    let rec = recovery_batch(&outs, &originals, &w, &s, &attack, AttributeMode::Uncontrolled, 14).unwrap();
    (anon_rate, rec.iter().filter(|(_, r)| *r).count() as f64 / N as f64)
}

#[test]
fn recovery_attack_does_not_help() {
    let (anon, rec) = recovery_rates(GuidanceConfig::default());
    assert!(rec <= anon + 0.02, "recovered {rec} vs anonymized {anon}");
}

#[test]
fn unconditional_replay_attack_stays_below_chance() {
    let (_, rec) = recovery_rates(GuidanceConfig::default().with_cfg(0.0));
    let p = 1.0 / 8.0;
    assert!(rec <= p + 3.0 * (p * (1.0 - p) / N as f64).sqrt(), "recovered {rec}");
}

#[test]
fn ddim_reconstructs_worse_than_ddpm() {
    let w = default_world();
    let s = sched();
    let x = inputs(&w, 50, 15);
    for cfg in [1.0, -10.0] {
        let ddpm = GuidanceConfig::default().with_cfg(cfg);
        let ddim = ddpm.with_solver(Solver::Ddim);
        let (gp, gi) = (Guide::new(&w, &s, ddpm).unwrap(), Guide::new(&w, &s, ddim).unwrap());
        let a = anonymize_batch(&x, &w, &s, &ddpm, AttributeMode::Keep, 15).unwrap();
        let b = anonymize_batch(&x, &w, &s, &ddim, AttributeMode::Keep, 15).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!(reconstruction_error(&gi, &q.traj).unwrap() >= reconstruction_error(&gp, &p.traj).unwrap());
        }
    }
}
