use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rotorlab::airframe::{feasibility_check, nominal_azimuths};
use rotorlab_lab::sampling::{hover_options, rotor_tilt, sample_config, sample_neighbor, SamplingSpec};

#[test]
fn sampled_airframes_stay_in_bounds() {
    let spec = SamplingSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let azimuths = nominal_azimuths(spec.motor_count);
    for _ in 0..1000 {
        let config = sample_config(&spec, &mut rng).unwrap();
        assert_eq!(config.motor_count(), spec.motor_count);
        assert!(feasibility_check(&config, &hover_options()).is_feasible());
        for (rotor, az) in config.rotors().iter().zip(&azimuths) {
            let t = rotor.position();
            assert!(t.norm() >= spec.l_min - 1e-12 && t.norm() <= spec.l_max + 1e-12);
            let nominal = nalgebra::Vector3::new(az.cos(), az.sin(), 0.0);
            assert!(t.normalize().dot(&nominal).clamp(-1.0, 1.0).acos() <= spec.cone_angle + 1e-9);
            assert!(rotor_tilt(rotor) <= spec.max_tilt + 1e-9);
        }
    }
}

#[test]
fn neighbors_stay_within_deviation() {
    let spec = SamplingSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let base = sample_config(&spec, &mut rng).unwrap();
    for _ in 0..200 {
        let n = sample_neighbor(&base, &spec, &mut rng).unwrap();
        for (a, b) in base.rotors().iter().zip(n.rotors()) {
            assert!((a.position() - b.position()).norm() <= spec.neighbor_pos_dev + 1e-12);
            let relative = b.orientation() * a.orientation().transpose();
            let angle = ((relative.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos();
            assert!(angle <= spec.neighbor_ang_dev + 1e-9);
            assert_eq!(a.spin(), b.spin());
        }
    }
}
