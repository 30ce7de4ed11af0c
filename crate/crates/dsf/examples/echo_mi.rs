//! Echo noise channel demo: the channel's mutual information is exact, not
//! estimated. With a constant noise scale s the rate is simply −ln s per
//! dimension, and the example compares the analytic value against a
//! histogram Monte-Carlo estimate of I(z:x).

use dsf::echo::{echo_mi, echo_sample};
use dsf::tensor::Graph;
use dsf::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let n = 100_000;
    let s_const = 0.6;

    // A 1-d channel: f(x) = x drawn uniform on [0,1], s(x) ≡ 0.6.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let f_vals: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    let g = Graph::new();
    let f = g.constant(&[n, 1], &f_vals);
    let s = g.constant(&[n, 1], &vec![s_const; n]);

    let sample = echo_sample(&g, f, s, 63, 11, None)?;
    let exact = sample.mi_nats.values()[0];
    println!("exact channel MI:      {exact:.6} nats");
    println!("analytic −ln s:        {:.6} nats", -f64::ln(s_const));

    // Histogram Monte-Carlo estimate of I(z:x) over the same samples:
    // discretize both variables into 64 bins and sum p log p/(pq).
    let z = sample.z.values();
    let bins = 64;
    let edges = |v: f64, lo: f64, hi: f64| -> usize {
        (((v - lo) / (hi - lo) * bins as f64) as isize).clamp(0, bins as isize - 1) as usize
    };
    let (zlo, zhi) = z
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let mut joint = vec![0.0f64; bins * bins];
    for i in 0..n {
        joint[edges(f_vals[i], 0.0, 1.0) * bins + edges(z[i], zlo, zhi)] += 1.0 / n as f64;
    }
    let mut px = vec![0.0; bins];
    let mut pz = vec![0.0; bins];
    for x in 0..bins {
        for zb in 0..bins {
            px[x] += joint[x * bins + zb];
            pz[zb] += joint[x * bins + zb];
        }
    }
    let mut mc = 0.0;
    for x in 0..bins {
        for zb in 0..bins {
            let p = joint[x * bins + zb];
            if p > 0.0 {
                mc += p * (p / (px[x] * pz[zb])).ln();
            }
        }
    }
    println!("histogram MC estimate: {mc:.6} nats (biased upward by binning)");

    // The same quantity straight from the s tensor:
    let direct = echo_mi(s)?.values()[0];
    println!("echo_mi(s):            {direct:.6} nats");
    Ok(())
}
