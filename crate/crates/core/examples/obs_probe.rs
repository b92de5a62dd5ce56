use mhe::dynamics::{flow, ContinuousModel, ControlSignal, IntegratorConfig};
use mhe::metrics::Counters;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

fn unif(rng: &mut ChaCha12Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn linear_model(a: DMatrix<f64>, c: DVector<f64>) -> ContinuousModel {
    let n = a.nrows();
    ContinuousModel::new(
        n,
        1,
        1,
        Box::new(move |x, _u| &a * x),
        Box::new(move |x, _u| DVector::from_element(1, c.dot(x))),
    )
}

fn main() {
    let mut rng = ChaCha12Rng::seed_from_u64(101);
    let ts = 0.5;
    let integ = IntegratorConfig::rk4(8);
    for n in [2usize, 3, 4] {
        let mut best = 0.0f64;
        let mut pass = 0usize;
        let mut first_pass = None;
        for draw in 0..2000 {
            let g = DMatrix::from_fn(n, n, |_, _| unif(&mut rng, -1.0, 1.0));
            let mut a = (&g - &g.transpose()).scale(0.5) + (&g + &g.transpose()).scale(0.05);
            a *= 2.4 / a.norm();
            let mut c = DVector::from_fn(n, |_, _| unif(&mut rng, -1.0, 1.0));
            c /= c.norm();
            let probe = linear_model(a.clone(), c.clone());
            let sig = ControlSignal::constant(0.0, DVector::zeros(1), ts);
            let cnt = Counters::new();
            let mut phi = DMatrix::zeros(n, n);
            for j in 0..n {
                let mut e = DVector::zeros(n);
                e[j] = 1.0;
                let col = flow(&probe, &e, &sig, 0.0, ts, &integ, &cnt).expect("linear flow");
                phi.set_column(j, &col);
            }
            let mut obs = DMatrix::zeros(n, n);
            let mut row = c.transpose();
            for k in 0..n {
                obs.set_row(k, &row);
                row *= &phi;
            }
            let sv = obs.svd(false, false).singular_values;
            let smin = sv[sv.len() - 1];
            if smin > best {
                best = smin;
            }
            if smin >= 0.02 {
                pass += 1;
                if first_pass.is_none() {
                    first_pass = Some(draw);
                }
            }
        }
        println!("n={n}: best sigma_min {best:.5}, {pass}/2000 pass 0.02, first pass {first_pass:?}");
    }
}
