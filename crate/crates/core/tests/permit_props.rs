use mrshare_core::geom::Point3;
use mrshare_core::locate::{FixQuality, PositionFix};
use mrshare_core::permit::{
    on_clock, replay_modes, update_permission, EventKind, PermissionMode, PermissionState,
    TransitionConfig,
};
use mrshare_core::twin::{ZoneClass, ZoneVerdict};
use proptest::prelude::*;

#[derive(Debug, Clone, Copy)]
struct Obs {
    gap: u64,
    quality: FixQuality,
    class: ZoneClass,
}

fn obs() -> impl Strategy<Value = Obs> {
    (
        prop_oneof![8 => Just(100u64), 1 => 0u64..5000],
        prop_oneof![6 => Just(FixQuality::Good), 1 => Just(FixQuality::Low), 1 => Just(FixQuality::None)],
        prop_oneof![6 => Just(ZoneClass::Permitted), 1 => Just(ZoneClass::Buffer), 1 => Just(ZoneClass::Restricted)],
    )
        .prop_map(|(gap, quality, class)| Obs { gap, quality, class })
}

fn fix_of(t: u64, o: &Obs) -> (PositionFix, ZoneVerdict) {
    let position = (o.quality != FixQuality::None).then_some(Point3::new(1.0, 1.0, 1.0));
    let fix = PositionFix {
        timestamp: t,
        position,
        rms_residual: position.map(|_| 0.01),
        quality: o.quality,
    };
    let verdict = ZoneVerdict {
        class: o.class,
        nearest_restricted_distance: match o.class {
            ZoneClass::Restricted => 0.0,
            ZoneClass::Buffer => 0.5,
            ZoneClass::Permitted => 5.0,
        },
        zone_id: None,
    };
    (fix, verdict)
}

fn clean(o: &Obs) -> bool {
    o.quality == FixQuality::Good && o.class == ZoneClass::Permitted
}

fn config() -> impl Strategy<Value = TransitionConfig> {
    (1u32..8, 200u64..3000).prop_map(|(k, timeout)| TransitionConfig {
        upgrade_k: k,
        dropout_timeout: timeout,
        warn_distance: 2.0,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn sharing_implies_fresh_clean_fix(cfg in config(), stream in prop::collection::vec(obs(), 1..120)) {
        let mut state = PermissionState::initial(0);
        let mut t = 0;
        let mut last: Option<(u64, Obs)> = None;
        let mut events = Vec::new();
        for o in &stream {
            t += o.gap;
            let (s, mut ev) = on_clock(&state, t, &cfg);
            events.append(&mut ev);
            if s.mode == PermissionMode::SharingAllowed {
                let (at, prev) = last.unwrap();
                prop_assert!(clean(&prev) && t - at <= cfg.dropout_timeout);
            }
            let (fix, verdict) = fix_of(t, o);
            let (s, mut ev) = update_permission(&s, &fix, &verdict, &cfg).unwrap();
            events.append(&mut ev);
            last = Some((t, *o));
            if s.mode == PermissionMode::SharingAllowed {
                prop_assert!(clean(o));
            } else if !clean(o) {
                // Downgrade happens in the same step as the observation.
                prop_assert!(s.mode.is_suspended());
            }
            state = s;
            let timeline = replay_modes(PermissionMode::SuspendedNoFix, &events);
            let replayed = timeline.last().map(|(_, m)| *m).unwrap_or(PermissionMode::SuspendedNoFix);
            prop_assert_eq!(replayed, state.mode);
        }
    }

    #[test]
    fn short_clean_runs_never_resume(k in 2u32..8, runs in prop::collection::vec((1u32..8, obs()), 1..40)) {
        let cfg = TransitionConfig { upgrade_k: k, dropout_timeout: 1_000_000, warn_distance: 0.1 };
        let mut state = PermissionState::initial(0);
        let mut t = 0;
        for (len, bad) in runs {
            let len = len.min(k - 1);
            let bad = if clean(&bad) { Obs { quality: FixQuality::Low, ..bad } } else { bad };
            let good = Obs { gap: 100, quality: FixQuality::Good, class: ZoneClass::Permitted };
            for o in std::iter::repeat_n(good, len as usize).chain(std::iter::once(bad)) {
                t += 100;
                let (fix, verdict) = fix_of(t, &o);
                let (s, ev) = update_permission(&state, &fix, &verdict, &cfg).unwrap();
                prop_assert!(ev.iter().all(|e| !matches!(e.kind, EventKind::Resumed | EventKind::Granted)));
                state = s;
            }
        }
        prop_assert_ne!(state.mode, PermissionMode::SharingAllowed);
    }

    #[test]
    fn every_mode_change_is_one_event(cfg in config(), stream in prop::collection::vec(obs(), 1..80)) {
        let mut state = PermissionState::initial(0);
        let mut t = 0;
        for o in &stream {
            t += o.gap;
            let before = state.mode;
            let (s, ev1) = on_clock(&state, t, &cfg);
            let (fix, verdict) = fix_of(t, o);
            let (s, ev2) = update_permission(&s, &fix, &verdict, &cfg).unwrap();
            let changes = ev1.iter().chain(&ev2).filter(|e| e.kind != EventKind::ApproachWarning).count();
            let mid_changed = usize::from(before != on_clock(&state, t, &cfg).0.mode);
            prop_assert!(changes >= usize::from(before != s.mode));
            prop_assert!(changes <= mid_changed + 1);
            for e in ev1.iter().chain(&ev2) {
                prop_assert_eq!(e.timestamp, t);
            }
            state = s;
        }
    }
}

#[test]
fn stale_fix_rejected() {
    let cfg = TransitionConfig::for_buffer(1.0);
    let s = PermissionState::initial(0);
    let o = Obs {
        gap: 0,
        quality: FixQuality::Good,
        class: ZoneClass::Permitted,
    };
    let (fix, verdict) = fix_of(500, &o);
    let (s, _) = update_permission(&s, &fix, &verdict, &cfg).unwrap();
    let (old, verdict) = fix_of(400, &o);
    assert!(update_permission(&s, &old, &verdict, &cfg).is_err());
}
