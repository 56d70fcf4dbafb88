use rand::Rng;

use super::*;
use crate::backbone::{BackboneConfig, MCGM_PREFIX};
use crate::cluster::ClusterConfig;
use crate::hierarchy::{build_hierarchy, element_hierarchy};
use crate::moldata::{batch, Molecule};
use crate::testutil::{apply, molecules, rng, rotation};

fn small() -> BackboneConfig {
    BackboneConfig {
        hidden_dim: 8,
        n_layers: 2,
        n_rbf_atom: 6,
        n_rbf_cluster: 5,
        zero_init_outputs: false,
        ..Default::default()
    }
}

fn lively(seed: u64) -> Model {
    let mut m = Model::new(small(), seed).unwrap();
    let mut r = rng(seed + 100);
    for p in m.params.iter_mut() {
        if p.name.ends_with(".b") {
            p.value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = r.random_range(-0.3..0.3));
        }
    }
    m.norm = Normalization {
        scale: 3.0,
        shift: -2.0,
    };
    m
}

fn hier_for(model: &Model, b: &Batch) -> Hierarchy {
    let snap = model.feature_snapshot(b, Some(&element_hierarchy(b).unwrap())).unwrap();
    build_hierarchy(b, &snap, model.config.n_levels, &ClusterConfig::default(), 0).unwrap()
}

#[test]
fn zero_heads_give_bias_times_counts() {
    let mut m = Model::new(small(), 1).unwrap();
    for p in m.params.iter_mut().filter(|p| p.name.contains("head")) {
        p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let b = batch(&molecules(2, [3, 6], 0)).unwrap();
    let h = hier_for(&m, &b);
    let p = predict(&m, &b, Some(&h), false).unwrap();
    assert!(p.energy.iter().all(|e| *e == 0.0));
    m.params.by_name_mut("head.atom.l2.b").unwrap().value.data_mut()[0] = 0.5;
    let p = predict(&m, &b, Some(&h), false).unwrap();
    for (g, e) in p.energy.iter().enumerate() {
        assert_eq!(*e, 0.5 * b.counts()[g] as f64);
    }
}

#[test]
fn one_atom_one_cluster_split() {
    let m = lively(2);
    let b = batch(&[Molecule::new(vec![6], vec![[0.0; 3]]).unwrap()]).unwrap();
    let h = hier_for(&m, &b);
    let p = predict(&m, &b, Some(&h), false).unwrap();
    assert_eq!(p.energy[0], p.energy_atomic[0] + p.energy_cluster[0]);
    assert_eq!(p.energy_atomic[0], p.atom_energies[0]);
    assert!(p.energy_cluster[0] != 0.0);
}

#[test]
fn per_graph_sums_match_loop_oracle() {
    let m = lively(3);
    let b = batch(&molecules(3, [2, 9], 4)).unwrap();
    let h = hier_for(&m, &b);
    let p = predict(&m, &b, Some(&h), false).unwrap();
    for g in 0..3 {
        let atoms: f64 = b.atoms_of(g).map(|i| p.atom_energies[i]).sum();
        assert!((atoms - p.energy_atomic[g]).abs() <= 1e-12 * atoms.abs().max(1.0));
        let total = p.energy_atomic[g] + p.energy_cluster[g];
        assert!((total - p.energy[g]).abs() <= 1e-12 * total.abs().max(1.0));
    }
}

#[test]
fn forces_need_tracked_positions() {
    let mut tape = Tape::new();
    let r = tape.constant(Tensor::zeros(vec![2, 3]));
    let e = tape.sum(r);
    assert!(matches!(forces(&mut tape, e, r), Err(Error::Contract(_))));
}

#[test]
fn forces_match_finite_differences() {
    let m = lively(5);
    for (k, mol) in molecules(3, [4, 10], 6).into_iter().enumerate() {
        let b = batch(&[mol.clone()]).unwrap();
        let h = hier_for(&m, &b);
        let f = predict(&m, &b, Some(&h), true).unwrap().forces.unwrap();
        let e_at = |pos: Vec<[f64; 3]>| {
            predict(&m, &b.with_positions(pos).unwrap(), Some(&h), false)
                .unwrap()
                .energy[0]
        };
        let step = 1e-4;
        let scale = f.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
        for i in 0..mol.len() {
            for c in 0..3 {
                let mut p = mol.positions.clone();
                p[i][c] += step;
                let ep = e_at(p.clone());
                p[i][c] -= 2.0 * step;
                let em = e_at(p);
                let fd = -(ep - em) / (2.0 * step);
                assert!(
                    (fd - f[i][c]).abs() <= 1e-6 * scale.max(1.0),
                    "mol {k} atom {i} comp {c}: {fd} vs {}",
                    f[i][c]
                );
            }
        }
    }
}

#[test]
fn translation_and_rotation() {
    let m = lively(6);
    let mol = molecules(1, [9, 9], 7).remove(0);
    let b = batch(&[mol.clone()]).unwrap();
    let h = hier_for(&m, &b);
    let base = predict(&m, &b, Some(&h), true).unwrap();
    let f0 = base.forces.unwrap();
    let mut r = rng(1);
    let q = rotation(&mut r);
    let t = [1.5, -3.0, 7.0];
    let moved = b
        .with_positions(mol.positions.iter().map(|p| apply(&q, t, p)).collect())
        .unwrap();
    let p = predict(&m, &moved, Some(&h), true).unwrap();
    assert!((p.energy[0] - base.energy[0]).abs() <= 1e-9 * (base.energy[0].abs() + 1.0));
    let norm = f0.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    let f1 = p.forces.unwrap();
    let mut err = 0.0;
    for (a, b) in f1.iter().zip(&f0) {
        let qb = apply(&q, [0.0; 3], b);
        err += (0..3).map(|c| (a[c] - qb[c]).powi(2)).sum::<f64>();
    }
    assert!(err.sqrt() <= 1e-8 * norm);
    // net force vanishes
    let net: [f64; 3] = std::array::from_fn(|c| f0.iter().map(|f| f[c]).sum());
    let mean = f0
        .iter()
        .map(|f| (f[0] * f[0] + f[1] * f[1] + f[2] * f[2]).sqrt())
        .sum::<f64>()
        / f0.len() as f64;
    assert!((net[0].powi(2) + net[1].powi(2) + net[2].powi(2)).sqrt() <= 1e-6 * mean);
}

#[test]
fn batch_prediction_is_extensive() {
    let m = lively(8);
    let mols = molecules(3, [3, 8], 9);
    let b = batch(&mols).unwrap();
    let h = hier_for(&m, &b);
    let whole = predict(&m, &b, Some(&h), true).unwrap();
    for g in 0..3 {
        let bg = batch(&mols[g..g + 1]).unwrap().with_graph_ids(vec![g as u64]).unwrap();
        let hg = hier_for(&m, &bg);
        let p = predict(&m, &bg, Some(&hg), true).unwrap();
        assert!((p.energy[0] - whole.energy[g]).abs() <= 1e-12 * p.energy[0].abs().max(1.0));
        let fw = &whole.forces.as_ref().unwrap()[b.atoms_of(g)];
        for (a, c) in p.forces.as_ref().unwrap().iter().zip(fw) {
            assert!((0..3).all(|k| (a[k] - c[k]).abs() <= 1e-10));
        }
    }
}

fn target_batch(e: Vec<f64>, f: Option<Vec<[f64; 3]>>) -> Batch {
    let n = f.as_ref().map_or(1, |f| f.len());
    let mut b = batch(&[Molecule::new(vec![1; n], (0..n).map(|i| [i as f64, 0.0, 0.0]).collect()).unwrap()]).unwrap();
    b.energies = Some(e);
    b.forces = f;
    b
}

fn pred(e: Vec<f64>, f: Option<Vec<[f64; 3]>>) -> Prediction {
    Prediction {
        energy_atomic: e.clone(),
        energy_cluster: vec![0.0; e.len()],
        atom_energies: Vec::new(),
        energy: e,
        forces: f,
    }
}

#[test]
fn loss_examples() {
    let b = target_batch(vec![1.0], Some(vec![[0.5, 0.0, -1.0]]));
    assert_eq!(
        loss_value(&pred(vec![1.0], Some(vec![[0.5, 0.0, -1.0]])), &b, LossMode::EnergyL1).unwrap(),
        0.0
    );
    assert_eq!(
        loss_value(
            &pred(vec![1.0], Some(vec![[0.5, 0.0, -1.0]])),
            &b,
            LossMode::EnergyForceMse
        )
        .unwrap(),
        0.0
    );
    assert_eq!(loss_value(&pred(vec![3.0], None), &b, LossMode::EnergyL1).unwrap(), 2.0);
    let l = loss_value(
        &pred(vec![2.0], Some(vec![[0.5, 0.0, -1.0]])),
        &b,
        LossMode::EnergyForceMse,
    )
    .unwrap();
    assert!((l - 0.01).abs() < 1e-15);
    let no_f = target_batch(vec![1.0], None);
    assert!(matches!(
        loss_and_grad(&lively(1), &no_f, None, LossMode::EnergyForceMse),
        Err(Error::Data(_)) | Err(Error::Contract(_))
    ));
    assert_eq!("energy_l1".parse::<LossMode>().unwrap(), LossMode::EnergyL1);
    assert!("l2".parse::<LossMode>().is_err());
}

#[test]
fn tape_loss_matches_plain_loss() {
    let m = lively(10);
    let b = batch(&molecules(2, [3, 7], 10)).unwrap();
    let h = hier_for(&m, &b);
    for mode in [LossMode::EnergyL1, LossMode::EnergyForceMse] {
        let lg = loss_and_grad(&m, &b, Some(&h), mode).unwrap();
        let p = predict(&m, &b, Some(&h), mode.needs_forces()).unwrap();
        let plain = loss_value(&p, &b, mode).unwrap();
        assert!((lg.loss - plain).abs() <= 1e-12 * plain.abs().max(1.0));
    }
}

fn loss_at(m: &Model, b: &Batch, h: &Hierarchy, mode: LossMode) -> f64 {
    let p = predict(m, b, Some(h), mode.needs_forces()).unwrap();
    loss_value(&p, b, mode).unwrap()
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let m = lively(12);
    let b = batch(&molecules(2, [4, 7], 12)).unwrap();
    let h = hier_for(&m, &b);
    let mut r = rng(3);
    for mode in [LossMode::EnergyL1, LossMode::EnergyForceMse] {
        let lg = loss_and_grad(&m, &b, Some(&h), mode).unwrap();
        for name in [
            "embedding",
            "interaction1.filter1.w",
            "head.atom.l1.w",
            "mcgm.layer0.dis.w",
            "mcgm.cascade.dis1.b",
        ] {
            let id = m.params.id(name).unwrap();
            let len = m.params.get(id).value.len();
            for _ in 0..3 {
                let k = r.random_range(0..len);
                let step = 1e-5;
                let mut mp = m.clone();
                mp.params.get_mut(id).value.data_mut()[k] += step;
                let lp = loss_at(&mp, &b, &h, mode);
                mp.params.get_mut(id).value.data_mut()[k] -= 2.0 * step;
                let lm = loss_at(&mp, &b, &h, mode);
                let fd = (lp - lm) / (2.0 * step);
                let an = lg.grads[id.0].data()[k];
                assert!(
                    (an - fd).abs() <= 1e-5 * fd.abs().max(1e-2),
                    "{mode:?} {name}[{k}]: {an} vs {fd}"
                );
            }
        }
    }
}

#[test]
fn frozen_zero_module_matches_plain_gradients() {
    let mols = molecules(2, [3, 8], 14);
    let mut b = batch(&mols).unwrap();
    b.energies = Some(vec![1.0, -2.0]);
    let mut full = Model::new(small(), 4).unwrap();
    let plain = Model::new(BackboneConfig { mcgm: false, ..small() }, 4).unwrap();
    let h = hier_for(&full, &b);
    full.params.zero_and_freeze(MCGM_PREFIX);
    let a = loss_and_grad(&full, &b, Some(&h), LossMode::EnergyL1).unwrap();
    let p = loss_and_grad(&plain, &b, None, LossMode::EnergyL1).unwrap();
    assert_eq!(a.loss, p.loss);
    for (i, param) in plain.params.iter().enumerate() {
        let j = full.params.id(&param.name).unwrap().0;
        assert_eq!(a.grads[j], p.grads[i], "{}", param.name);
    }
}

#[test]
fn dump_format() {
    let m = lively(1);
    let b = batch(&molecules(2, [2, 3], 1)).unwrap();
    let h = hier_for(&m, &b);
    let p = predict(&m, &b, Some(&h), true).unwrap();
    let text = p.dump(&b);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2 + b.n_atoms());
    assert_eq!(lines[0].split(' ').count(), 4);
    assert_eq!(lines[2].split(' ').count(), 5);
}
