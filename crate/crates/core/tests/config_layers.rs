use std::fs;

use vllsa::harness::config::{calibration_toml, load};
use vllsa::VllsaError;

fn write(dir: &std::path::Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn overrides_beat_file_beats_calibration_beats_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cal = calibration_toml(0.039, 0.03, 0.2).unwrap();
    write(dir, "cal.toml", &format!("{cal}\n[sim]\ntail = 0.1\n"));
    let cfg = write(
        dir,
        "c.toml",
        "calibration = \"cal.toml\"\n[spring]\nlever_a = 0.02\n[sim]\ntail = 0.2\nduration = 4.0\n",
    );
    let plain = load(&cfg, &[]).unwrap();
    assert!(plain.calibrated);
    assert_eq!(plain.config.spring.lever_e, 0.039);
    assert_eq!(plain.config.spring.lever_a, 0.02);
    assert_eq!(plain.config.drive.torque_product, 0.2);
    assert_eq!(plain.config.sim.tail, 0.2);
    assert_eq!(plain.config.sim.duration, 4.0);
    assert_eq!(plain.config.sim.dt, 1e-4);

    let over = load(
        &cfg,
        &["sim.duration=3".into(), "spring.lever_e=0.038".into()],
    )
    .unwrap();
    assert_eq!(over.config.sim.duration, 3.0);
    assert_eq!(over.config.spring.lever_e, 0.038);
    assert_eq!(over.config.sim.tail, 0.2);
}

#[test]
fn unit_suffixes_normalize_and_conflict_with_their_base_key() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", "[spring]\nlever_e_mm = 44.0\n");
    let c = load(&cfg, &[]).unwrap();
    assert!((c.config.spring.lever_e - 0.044).abs() < 1e-15);

    let both = write(
        tmp.path(),
        "d.toml",
        "[spring]\nlever_e_mm = 44.0\nlever_e = 0.044\n",
    );
    assert!(matches!(load(&both, &[]), Err(VllsaError::Config(_))));
}

#[test]
fn stiffness_levels_given_as_stiffness_replace_positions() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", "");
    let c = load(&cfg, &["schedule.inplace.k_hs=40".into()]).unwrap();
    assert_eq!(c.config.schedule.inplace.k_hs, Some(40.0));
    assert_eq!(c.config.schedule.inplace.x_hs, None);
}

#[test]
fn unknown_and_forbidden_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", "");
    for bad in ["sim.colour=1", "leg.mount=\"boom\"", "nonsense=2"] {
        assert!(load(&cfg, &[bad.into()]).is_err(), "{bad}");
    }
    assert!(load(&cfg, &["sim.tail=0.1".into(), "sim.tail=0.2".into()]).is_err());
}

#[test]
fn defaults_alone_are_not_calibrated() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", "[spring]\nlever_e = 0.039\n");
    let c = load(&cfg, &[]).unwrap();
    assert!(!c.calibrated);
    assert!(c.require_calibrated().is_err());
}

#[test]
fn serialized_config_loads_back_unchanged() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", "[sim]\ntail = 0.25\n");
    let first = load(&cfg, &[]).unwrap().config;
    let again = write(tmp.path(), "d.toml", &first.to_toml_string().unwrap());
    let second = load(&again, &[]).unwrap();
    assert_eq!(second.config, first);
    assert!(second.calibrated);
}
