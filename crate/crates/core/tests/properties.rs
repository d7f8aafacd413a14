use elastodyn::autodiff::{Jet, Scalar};
use elastodyn::data::{
    nrmse, read_csv, write_csv_to, Geometry, PlaneWaveSpec, Provenance, ReferenceDataset, WaveField, WaveKind,
};
use elastodyn::layout::Dimension;
use elastodyn::network::{Dims, ModifiedMlpParams};
use elastodyn::physics::{residuals, MaterialParams, ScaleSet};
use elastodyn::sampling::{epoch_batches, lhs_seeded};
use elastodyn::training::{adam_step, lr_schedule, map_material, AdamState, Mapping, Stage};
use ndarray::Array2;
use proptest::prelude::*;

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        ..ProptestConfig::default()
    }
}

/// Straight-line modified MLP read directly from the flat parameter layout.
fn reference_mlp(dims: Dims, flat: &[f64], x: &[f64]) -> Vec<f64> {
    let mut cursor = 0;
    let mut take = |fan_in: usize, fan_out: usize| {
        let w = flat[cursor..cursor + fan_in * fan_out].to_vec();
        cursor += fan_in * fan_out;
        let b = flat[cursor..cursor + fan_out].to_vec();
        cursor += fan_out;
        move |input: &[f64]| -> Vec<f64> {
            (0..fan_out)
                .map(|j| b[j] + (0..fan_in).map(|i| input[i] * w[i * fan_out + j]).sum::<f64>())
                .collect()
        }
    };
    let (i, h) = (dims.n_in, dims.n_hidden);
    let enc1 = take(i, h);
    let enc2 = take(i, h);
    let first = take(i, h);
    let gates: Vec<_> = (1..dims.n_layers).map(|_| take(h, h)).collect();
    let out = take(h, dims.n_out);

    let tanh = |v: Vec<f64>| v.into_iter().map(f64::tanh).collect::<Vec<_>>();
    let u = tanh(enc1(x));
    let v = tanh(enc2(x));
    let mut hcur = tanh(first(x));
    for g in &gates {
        let z = tanh(g(&hcur));
        hcur = (0..h).map(|k| u[k] + z[k] * (v[k] - u[k])).collect();
    }
    out(&hcur)
}

fn wave_strategy(dim: Dimension) -> impl Strategy<Value = (WaveKind, usize, usize)> {
    let n = dim.n_space();
    (any::<bool>(), 0..n, 1..n).prop_map(move |(is_p, axis, off)| {
        if is_p {
            (WaveKind::P, axis, axis)
        } else {
            (WaveKind::S, axis, (axis + off) % n)
        }
    })
}

fn unit_scales(dim: Dimension, mat: MaterialParams, length: f64, time: f64, field: f64) -> ScaleSet {
    ScaleSet {
        dimension: dim,
        length,
        time,
        fields: vec![field; dim.n_fields()],
        modulus: mat.lambda.max(mat.mu),
        density: mat.rho,
    }
}

fn max_residual(field: &WaveField, dim: Dimension, scales: &ScaleSet, x: &[f64], t: f64) -> f64 {
    let mat = field.material().scaled(scales);
    let jets = field.jets(dim, x, t, scales);
    residuals(&jets, &mat, scales, None)
        .unwrap()
        .into_iter()
        .fold(0.0, |a, r: f64| a.max(r.abs()))
}

proptest! {
    #![proptest_config(config(64))]

    #[test]
    fn mlp_matches_straight_line_oracle(
        n_layers in 1usize..4,
        n_hidden in 1usize..7,
        seed in any::<u64>(),
        x in prop::collection::vec(-2.0f64..2.0, 3),
        perturb in prop::collection::vec(-0.3f64..0.3, 16),
    ) {
        let dims = Dims::new(3, n_hidden, n_layers, 5);
        let mut net = ModifiedMlpParams::init(dims, seed).unwrap();
        // Nonzero biases so every parameter matters.
        let flat: Vec<f64> = net
            .to_flat()
            .iter()
            .enumerate()
            .map(|(k, w)| w + perturb[k % perturb.len()])
            .collect();
        net.set_flat(&flat).unwrap();
        let got = net.forward(&x).unwrap();
        let want = reference_mlp(dims, &flat, &x);
        for (g, w) in got.iter().zip(&want) {
            prop_assert!((g - w).abs() <= 1e-12 * (1.0 + w.abs()), "{g} vs {w}");
        }
    }

    #[test]
    fn plane_waves_annihilate_residuals_2d(
        (kind, axis, pol) in wave_strategy(Dimension::Plane),
        lambda in 0.1f64..10.0,
        mu in 0.05f64..5.0,
        amp in -2.0f64..2.0,
        k in 0.005f64..0.2,
        backward in any::<bool>(),
        x in 0.0f64..200.0,
        y in 0.0f64..10.0,
        t in 0.0f64..0.5,
    ) {
        let mat = MaterialParams::new(lambda, mu, 1e-3).unwrap();
        let mut w = PlaneWaveSpec::new(kind, mat, amp, k, axis, pol).unwrap();
        if backward {
            w = w.reversed();
        }
        let field = WaveField::new(vec![w]).unwrap();
        let scales = unit_scales(Dimension::Plane, mat, 200.0, 0.5, 1.0);
        prop_assert!(max_residual(&field, Dimension::Plane, &scales, &[x, y], t) < 1e-9);
    }

    #[test]
    fn superposed_waves_annihilate_residuals_3d(
        a in wave_strategy(Dimension::Solid),
        b in wave_strategy(Dimension::Solid),
        lambda in 0.1f64..10.0,
        mu in 0.05f64..5.0,
        amps in (-2.0f64..2.0, -2.0f64..2.0),
        p in prop::collection::vec(0.0f64..10.0, 3),
        t in 0.0f64..0.5,
    ) {
        let mat = MaterialParams::new(lambda, mu, 1e-3).unwrap();
        let k = std::f64::consts::TAU / 200.0;
        let field = WaveField::new(vec![
            PlaneWaveSpec::new(a.0, mat, amps.0, k, a.1, a.2).unwrap(),
            PlaneWaveSpec::new(b.0, mat, amps.1, k, b.1, b.2).unwrap().with_phase(0.7),
        ])
        .unwrap();
        let scales = unit_scales(Dimension::Solid, mat, 200.0, 0.5, 1.0);
        prop_assert!(max_residual(&field, Dimension::Solid, &scales, &p, t) < 1e-9);
    }

    /// Residuals vanish for exact fields whatever the characteristic scales.
    #[test]
    fn annihilation_is_scale_invariant(
        length in 1.0f64..1000.0,
        time in 1e-3f64..10.0,
        field_scale in 1e-3f64..10.0,
        x in 0.0f64..200.0,
        t in 0.0f64..0.5,
    ) {
        let mat = MaterialParams::new(0.533334, 0.1, 0.92e-6).unwrap();
        let k = std::f64::consts::TAU / 200.0;
        let field = WaveField::new(vec![
            PlaneWaveSpec::p(mat, 1.0, k, 0).unwrap(),
            PlaneWaveSpec::s(mat, 0.5, k, 0, 1).unwrap(),
        ])
        .unwrap();
        let scales = unit_scales(Dimension::Plane, mat, length, time, field_scale);
        let r = max_residual(&field, Dimension::Plane, &scales, &[x, 3.0], t);
        prop_assert!(r < 1e-9 * (1.0 + (length / field_scale) * (time * time).max(1.0)), "{r}");
    }

    /// Swapping x and y in the wave swaps the residual components.
    #[test]
    fn residuals_mirror_under_axis_swap(
        lambda in 0.1f64..10.0,
        mu in 0.05f64..5.0,
        a in 0.0f64..10.0,
        b in 0.0f64..10.0,
        t in 0.0f64..0.5,
        phase in 0.0f64..6.0,
        tweak in 0.9f64..1.1,
    ) {
        let mat = MaterialParams::new(lambda, mu, 1e-3).unwrap();
        let k = 0.3;
        let along = |axis: usize| {
            WaveField::new(vec![
                PlaneWaveSpec::p(mat, 1.0, k, axis).unwrap().with_phase(phase),
                PlaneWaveSpec::s(mat, 0.4, k, axis, 1 - axis).unwrap(),
            ])
            .unwrap()
        };
        let scales = unit_scales(Dimension::Plane, mat, 10.0, 0.5, 1.0);
        // A mismatched material makes the residuals nonzero and comparable.
        let mut wrong = mat.scaled(&scales);
        wrong.lambda *= tweak;
        let rx = residuals(&along(0).jets(Dimension::Plane, &[a, b], t, &scales), &wrong, &scales, None).unwrap();
        let ry = residuals(&along(1).jets(Dimension::Plane, &[b, a], t, &scales), &wrong, &scales, None).unwrap();
        // (r_x, r_y, r_xx, r_yy, r_xy) <-> (r_y, r_x, r_yy, r_xx, r_xy)
        let perm = [1, 0, 3, 2, 4];
        for (i, &j) in perm.iter().enumerate() {
            prop_assert!((rx[i] - ry[j]).abs() <= 1e-10 * (1.0 + rx[i].abs()), "{i}: {} vs {}", rx[i], ry[j]);
        }
    }

    #[test]
    fn lhs_fills_every_stratum(
        n in 1usize..300,
        bounds in prop::collection::vec((-50.0f64..50.0, 0.01f64..100.0), 1..5),
        seed in any::<u64>(),
    ) {
        let bounds: Vec<(f64, f64)> = bounds.into_iter().map(|(lo, w)| (lo, lo + w)).collect();
        let b = lhs_seeded(n, &bounds, seed).unwrap();
        prop_assert_eq!(b.points.dim(), (n, bounds.len()));
        for (j, &(lo, hi)) in bounds.iter().enumerate() {
            let mut hits = vec![0usize; n];
            for &x in b.points.column(j) {
                prop_assert!(x >= lo && x <= hi);
                let k = (((x - lo) / (hi - lo)) * n as f64) as usize;
                hits[k.min(n - 1)] += 1;
            }
            // Rounding can push a point across a stratum edge by one ulp.
            let misplaced = hits.iter().filter(|&&h| h != 1).count();
            prop_assert!(misplaced <= 2, "{misplaced} misplaced strata");
        }
    }

    #[test]
    fn epoch_batches_partition_indices(
        n in 1usize..500,
        frac in 0.01f64..1.0,
        seed in any::<u64>(),
        epoch in 0u64..1000,
    ) {
        let batch = ((n as f64 * frac).ceil() as usize).clamp(1, n);
        let batches = epoch_batches(n, batch, seed, epoch).unwrap();
        prop_assert_eq!(batches.len(), n.div_ceil(batch));
        prop_assert!(batches[..batches.len() - 1].iter().all(|b| b.len() == batch));
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(batches, epoch_batches(n, batch, seed, epoch).unwrap());
    }

    #[test]
    fn nrmse_shift_and_scale_invariant(
        r in prop::collection::vec(-10.0f64..10.0, 2..40),
        noise in prop::collection::vec(-1.0f64..1.0, 40),
        c in -100.0f64..100.0,
        a in 0.01f64..100.0,
    ) {
        prop_assume!(r.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - r.iter().cloned().fold(f64::INFINITY, f64::min) > 1e-3);
        let p: Vec<f64> = r.iter().zip(&noise).map(|(x, e)| x + e).collect();
        let base = nrmse(&p, &r).unwrap();
        prop_assert!(base >= 0.0);
        prop_assert_eq!(nrmse(&r, &r).unwrap(), 0.0);
        let shift = |v: &[f64]| v.iter().map(|x| x + c).collect::<Vec<_>>();
        let scale = |v: &[f64], k: f64| v.iter().map(|x| x * k).collect::<Vec<_>>();
        prop_assert!((nrmse(&shift(&p), &shift(&r)).unwrap() - base).abs() <= 1e-9 * (1.0 + base));
        prop_assert!((nrmse(&scale(&p, a), &scale(&r, a)).unwrap() - base).abs() <= 1e-12 * (1.0 + base));
        // Scaling only the error scales the metric.
        let err_scaled: Vec<f64> = r.iter().zip(&noise).map(|(x, e)| x + a * e).collect();
        prop_assert!((nrmse(&err_scaled, &r).unwrap() - a * base).abs() <= 1e-9 * (1.0 + a * base));
    }

    #[test]
    fn csv_round_trip_is_exact(
        rows in prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 8), 1..30),
        surrogate in any::<bool>(),
    ) {
        let dim = Dimension::Plane;
        let n = rows.len();
        let mut points = Array2::zeros((n, 3));
        let mut fields = Array2::zeros((n, 5));
        for (i, r) in rows.iter().enumerate() {
            for j in 0..3 {
                points[[i, j]] = r[j];
            }
            for j in 0..5 {
                fields[[i, j]] = r[3 + j];
            }
        }
        let mut ds = ReferenceDataset {
            dimension: dim,
            surrogate: false,
            points,
            fields,
            geometry: Geometry::beam(dim),
            boundary: vec![false; n],
            provenance: Provenance::Manufactured,
            material_hint: None,
        };
        if surrogate {
            ds = ds.with_mu(0.0625);
        }
        let mut buf = Vec::new();
        write_csv_to(&mut buf, &ds).unwrap();
        let back = read_csv(buf.as_slice(), ds.schema(), Provenance::Manufactured).unwrap();
        prop_assert_eq!(&back.points, &ds.points);
        prop_assert_eq!(&back.fields, &ds.fields);
    }

    #[test]
    fn adam_first_step_has_lr_magnitude(
        g in prop::collection::vec(-1e3f64..1e3, 1..20),
        lr in 1e-6f64..1e-1,
    ) {
        prop_assume!(g.iter().all(|x| x.abs() > 1e-3));
        let mut s = AdamState::new(g.len(), lr);
        let mut p = vec![0.0; g.len()];
        adam_step(&mut s, &mut p, &g).unwrap();
        for (pi, gi) in p.iter().zip(&g) {
            prop_assert!((pi + lr * gi.signum()).abs() <= 1e-6 * lr.max(1e-3));
        }
    }

    #[test]
    fn schedule_never_increases(
        epochs in prop::collection::vec(1usize..50, 1..5),
        start in -5.0f64..-1.0,
    ) {
        let stages: Vec<Stage> = epochs
            .iter()
            .enumerate()
            .map(|(i, &e)| Stage { epochs: e, lr: 10f64.powf(start - i as f64) })
            .collect();
        let total: usize = epochs.iter().sum();
        let lrs: Vec<f64> = (0..total).map(|e| lr_schedule(e, &stages).unwrap()).collect();
        prop_assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(lr_schedule(total, &stages).is_err());
    }

    #[test]
    fn bounded_mappings_stay_in_range(raw in (-50.0f64..50.0, -50.0f64..50.0), modulus in 1.0f64..1e6) {
        let s = map_material([raw.0, raw.1], Mapping::Sigmoid, modulus);
        prop_assert!(s.lambda >= 0.0 && s.lambda <= modulus && s.mu >= 0.0 && s.mu <= modulus);
        let t = map_material([raw.0, raw.1], Mapping::Tanh, modulus);
        prop_assert!(t.lambda.abs() <= modulus && t.mu.abs() <= modulus);
        let l = map_material([raw.0, raw.1], Mapping::Linear, modulus);
        prop_assert!((l.lambda - modulus * raw.0).abs() <= 1e-9 * modulus * (1.0 + raw.0.abs()));
    }

    /// Forward-mode jets obey the chain and product rules.
    #[test]
    fn jet_chain_rule(x in -2.0f64..2.0, a in -3.0f64..3.0) {
        let j = Jet::<f64, 1> { v: x, d: [1.0], dd: Some(0.0) };
        // f = sin(a x^2) * exp(x)
        let f = (j.square().scale(a)).sin() * j.exp();
        let (s, c, e) = ((a * x * x).sin(), (a * x * x).cos(), x.exp());
        let d1 = e * (s + 2.0 * a * x * c);
        let d2 = e * (s + 4.0 * a * x * c + 2.0 * a * c - 4.0 * a * a * x * x * s);
        prop_assert!((f.v - s * e).abs() < 1e-12);
        prop_assert!((f.d[0] - d1).abs() <= 1e-10 * (1.0 + d1.abs()));
        prop_assert!((f.dd.unwrap() - d2).abs() <= 1e-10 * (1.0 + d2.abs()));
    }
}
