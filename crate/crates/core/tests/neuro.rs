use std::collections::BTreeMap;

use lcpm_core::neuro::{
    count_per_epoch, detect_spikes, run_neuro, CountMode, NeuroModelName, NeuroModelSpec, NeuroRunOptions,
    Segmentation,
};
use lcpm_core::sde::{integrate_euler, integrate_sde, Path, VectorField};
use lcpm_core::Error;
use proptest::prelude::*;

/// Voltage trace with Gaussian bumps of height `amp` at the given times.
fn bump_trace(events: &[(f64, f64)], t_end: f64, dt: f64, base: f64, width: f64) -> Path {
    let mut p = Path::new(1);
    let n = (t_end / dt) as usize;
    for i in 0..=n {
        let t = i as f64 * dt;
        let v = base
            + events
                .iter()
                .map(|(tk, amp)| amp * (-((t - tk) / width).powi(2)).exp())
                .sum::<f64>();
        p.push(t, &[v]);
    }
    p
}

#[test]
fn defaults_build_for_every_model() {
    for name in NeuroModelName::ALL {
        let spec = NeuroModelSpec::defaults(name);
        let model = spec.build().unwrap();
        assert_eq!(model.name(), name);
        assert_eq!(model.default_guess().len(), model.dim());
        assert_eq!(spec.noise_sigma, name.default_sigma());
        assert_eq!(NeuroModelName::parse(name.as_str()).unwrap(), name);
        for (k, v) in name.default_params() {
            assert_eq!(spec.params.get(*k), Some(v), "{}: {k}", name.as_str());
        }
    }
    assert_eq!(NeuroModelName::InapikBurster.default_sigma(), 1.0);
    assert_eq!(NeuroModelName::BetaCellPair.default_sigma(), 10.0);
    assert_eq!(NeuroModelName::HhMmo.default_sigma(), 5e-4);
    assert_eq!(NeuroModelSpec::defaults(NeuroModelName::BetaCellPair).build().unwrap().dim(), 6);
}

#[test]
fn overrides_are_validated() {
    let mut o = BTreeMap::new();
    o.insert("sigma".to_string(), 0.25);
    let spec = NeuroModelSpec::with_overrides(NeuroModelName::HhMmo, &o).unwrap();
    assert_eq!(spec.noise_sigma, 0.25);
    o.insert("nonsense".to_string(), 1.0);
    assert!(matches!(
        NeuroModelSpec::with_overrides(NeuroModelName::HhMmo, &o),
        Err(Error::UnknownParameter(_))
    ));
    assert!(matches!(NeuroModelName::parse("fitzhugh"), Err(Error::UnknownModel(_))));
}

#[test]
fn noiseless_euler_maruyama_is_explicit_euler() {
    let model = NeuroModelSpec::defaults(NeuroModelName::HhMmo).build().unwrap();
    let x0 = model.default_guess();
    let a = integrate_sde(&model, &model.diffusion(), &x0, (0.0, 50.0), 5e-3, 0.0, 3).unwrap();
    let b = integrate_euler(&model, &x0, (0.0, 50.0), 5e-3).unwrap();
    assert_eq!(a.states, b.states);
}

#[test]
fn runs_are_reproducible_and_seed_dependent() {
    let model = NeuroModelSpec::defaults(NeuroModelName::InapikBurster).build().unwrap();
    let seg = Segmentation::SpikesPerBurst {
        up: -30.0,
        down: -40.0,
        gap_factor: 3.0,
    };
    let opts = |seed| NeuroRunOptions {
        dt: 1e-3,
        duration: 3000.0,
        sigma: 1.0,
        seed,
        trace_stride: 50,
        target_epochs: 0,
    };
    let x0 = model.default_guess();
    let a = run_neuro(&model, &x0, &seg, &opts(1)).unwrap();
    let b = run_neuro(&model, &x0, &seg, &opts(1)).unwrap();
    let c = run_neuro(&model, &x0, &seg, &opts(2)).unwrap();
    assert_eq!(a.spikes, b.spikes);
    assert_eq!(a.counts, b.counts);
    assert_eq!(a.trace.as_ref().unwrap().states, b.trace.as_ref().unwrap().states);
    assert_ne!(a.spikes, c.spikes);
    assert!(!a.spikes.is_empty());
}

#[test]
fn segmentation_serializes_with_a_mode_tag() {
    let seg = Segmentation::SmallBetweenSpikes {
        small_up: 1.0,
        small_down: 0.5,
        big_up: 20.0,
        big_down: 10.0,
        merge_window: 2.0,
    };
    let text = serde_json::to_string(&seg).unwrap();
    assert!(text.contains("\"mode\":\"small_between_spikes\""));
    assert_eq!(serde_json::from_str::<Segmentation>(&text).unwrap(), seg);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn burst_sizes_are_recovered_from_a_trace(sizes in proptest::collection::vec(1u64..7, 3..9)) {
        let mut events = Vec::new();
        let mut t = 2.0;
        for &s in &sizes {
            for _ in 0..s {
                events.push((t, 60.0));
                t += 1.0;
            }
            t += 5.0;
        }
        let trace = bump_trace(&events, t, 0.01, -60.0, 0.15);
        let spikes = detect_spikes(&trace, 0, -30.0, -45.0).unwrap();
        prop_assert_eq!(spikes.len() as u64, sizes.iter().sum::<u64>());
        // Median inter-spike gap is 1 only if most gaps are intra-burst.
        prop_assume!(sizes.iter().map(|s| s - 1).sum::<u64>() as usize > sizes.len());
        let counts = count_per_epoch(&spikes, &CountMode::SpikesPerBurst { gap_factor: 3.0 }, true);
        prop_assert_eq!(&counts.counts[..], &sizes[1..sizes.len() - 1]);
        prop_assert_eq!(counts.open_tail, Some(*sizes.last().unwrap()));
    }

    #[test]
    fn small_oscillation_counts_are_recovered(gaps in proptest::collection::vec(0u64..6, 2..8)) {
        let mut events = vec![(2.0, 50.0)];
        let mut t = 2.0;
        for &g in &gaps {
            t += 2.0;
            for _ in 0..g {
                events.push((t, 1.0));
                t += 1.0;
            }
            t += 1.0;
            events.push((t, 50.0));
        }
        let trace = bump_trace(&events, t + 3.0, 0.005, 0.0, 0.2);
        let small = detect_spikes(&trace, 0, 0.5, 0.25).unwrap();
        let big = detect_spikes(&trace, 0, 25.0, 10.0).unwrap();
        prop_assert_eq!(big.len(), gaps.len() + 1);
        // Each big spike also crosses the small threshold on its upstroke.
        prop_assert_eq!(small.len() as u64, gaps.iter().sum::<u64>() + big.len() as u64);
        let counts = count_per_epoch(
            &big,
            &CountMode::SmallBetweenSpikes { small_events: &small, merge_window: 0.5 },
            false,
        );
        prop_assert_eq!(counts.counts, gaps);
        prop_assert_eq!(counts.open_tail, Some(0));
    }
}
