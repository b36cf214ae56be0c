//! Concordance index, Kaplan-Meier estimator, log-rank test and
//! median-risk stratification.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::survival::{Outcome, RiskBatch};

/// Harrell's concordance index.
///
/// A pair is comparable when `t_i < t_j` and subject `i` had the event; it is
/// concordant when `h_i > h_j`, and ties in `h` count one half. Pairs with
/// equal times are not comparable.
pub fn concordance_index(batch: &RiskBatch) -> Result<f64> {
    let n = batch.len();
    // Dense ranks of h, ties sharing a rank.
    let mut by_h: Vec<usize> = (0..n).collect();
    by_h.sort_by(|&a, &b| batch.scores[a].total_cmp(&batch.scores[b]));
    let mut rank = vec![0usize; n];
    let mut r = 0;
    for w in 0..n {
        if w > 0 && batch.scores[by_h[w]] != batch.scores[by_h[w - 1]] {
            r += 1;
        }
        rank[by_h[w]] = r;
    }
    let mut tree = Fenwick::new(r + 1);

    let mut by_t: Vec<usize> = (0..n).collect();
    by_t.sort_by(|&a, &b| batch.outcomes[b].time.total_cmp(&batch.outcomes[a].time));
    let (mut comparable, mut concordant, mut tied) = (0u64, 0u64, 0u64);
    let mut inserted = 0u64;
    let mut start = 0;
    while start < n {
        let t = batch.outcomes[by_t[start]].time;
        let mut end = start;
        while end < n && batch.outcomes[by_t[end]].time == t {
            end += 1;
        }
        // Everyone inserted so far has a strictly later time.
        for &i in &by_t[start..end] {
            if batch.outcomes[i].event {
                let below = if rank[i] == 0 { 0 } else { tree.prefix(rank[i] - 1) };
                let same = tree.prefix(rank[i]) - below;
                comparable += inserted;
                concordant += below;
                tied += same;
            }
        }
        for &i in &by_t[start..end] {
            tree.add(rank[i]);
            inserted += 1;
        }
        start = end;
    }
    if comparable == 0 {
        return Err(Error::UndefinedMetric("no comparable pairs for the concordance index".into()));
    }
    Ok((concordant as f64 + 0.5 * tied as f64) / comparable as f64)
}

struct Fenwick {
    tree: Vec<u64>,
}

impl Fenwick {
    fn new(n: usize) -> Self {
        Self { tree: vec![0; n + 1] }
    }

    fn add(&mut self, i: usize) {
        let mut k = i + 1;
        while k < self.tree.len() {
            self.tree[k] += 1;
            k += k & k.wrapping_neg();
        }
    }

    /// Count of entries with index `<= i`.
    fn prefix(&self, i: usize) -> u64 {
        let mut k = i + 1;
        let mut s = 0;
        while k > 0 {
            s += self.tree[k];
            k -= k & k.wrapping_neg();
        }
        s
    }
}

/// Product-limit survival estimate, one entry per distinct event time.
#[derive(Clone, Debug, PartialEq)]
pub struct KmCurve {
    pub times: Vec<f64>,
    pub survival: Vec<f64>,
    pub at_risk: Vec<usize>,
    pub events: Vec<usize>,
}

impl KmCurve {
    /// `S(t)`: right-continuous step function, 1 before the first event.
    pub fn at(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&x| x <= t);
        if k == 0 {
            1.0
        } else {
            self.survival[k - 1]
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("time,survival,at_risk,events\n");
        for i in 0..self.times.len() {
            let _ = writeln!(s, "{},{},{},{}", self.times[i], self.survival[i], self.at_risk[i], self.events[i]);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

pub fn kaplan_meier(outcomes: &[Outcome]) -> KmCurve {
    let mut sorted: Vec<Outcome> = outcomes.to_vec();
    sorted.sort_by(|a, b| a.time.total_cmp(&b.time));
    let mut curve = KmCurve {
        times: Vec::new(),
        survival: Vec::new(),
        at_risk: Vec::new(),
        events: Vec::new(),
    };
    let mut s = 1.0;
    let mut i = 0;
    let n = sorted.len();
    while i < n {
        let t = sorted[i].time;
        let at_risk = n - i;
        let mut d = 0;
        while i < n && sorted[i].time == t {
            d += usize::from(sorted[i].event);
            i += 1;
        }
        if d > 0 {
            s *= 1.0 - d as f64 / at_risk as f64;
            curve.times.push(t);
            curve.survival.push(s);
            curve.at_risk.push(at_risk);
            curve.events.push(d);
        }
    }
    curve
}

/// Step plot of one or more curves as a standalone SVG document.
pub fn km_svg(curves: &[(&str, &KmCurve)]) -> String {
    let (w, h, pad) = (480.0, 320.0, 40.0);
    let t_max = curves
        .iter()
        .flat_map(|(_, c)| c.times.last().copied())
        .fold(1.0f64, f64::max);
    let x = |t: f64| pad + (w - 2.0 * pad) * t / t_max;
    let y = |s: f64| h - pad - (h - 2.0 * pad) * s;
    let colors = ["#c0392b", "#2471a3", "#229954", "#7d3c98"];
    let mut out = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n");
    let _ = writeln!(
        out,
        "<path d=\"M{pad},{pad} L{pad},{} L{},{}\" stroke=\"black\" fill=\"none\"/>",
        h - pad,
        w - pad,
        h - pad
    );
    for (k, (label, c)) in curves.iter().enumerate() {
        let color = colors[k % colors.len()];
        let mut d = format!("M{:.2},{:.2}", x(0.0), y(1.0));
        let mut prev = 1.0;
        for (t, s) in c.times.iter().zip(&c.survival) {
            let _ = write!(d, " L{:.2},{:.2} L{:.2},{:.2}", x(*t), y(prev), x(*t), y(*s));
            prev = *s;
        }
        let _ = write!(d, " L{:.2},{:.2}", x(t_max), y(prev));
        let _ = writeln!(out, "<path d=\"{d}\" stroke=\"{color}\" fill=\"none\"/>");
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\" font-size=\"12\">{label}</text>",
            w - pad - 80.0,
            pad + 15.0 * (k as f64 + 1.0)
        );
    }
    out.push_str("</svg>\n");
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRank {
    pub chi_square: f64,
    pub p: f64,
}

/// Two-group log-rank test with one degree of freedom.
pub fn log_rank_test(a: &[Outcome], b: &[Outcome]) -> Result<LogRank> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::DegenerateTest("log-rank test needs two nonempty groups".into()));
    }
    let mut times: Vec<f64> = a.iter().chain(b).filter(|o| o.event).map(|o| o.time).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let (mut o_minus_e, mut var) = (0.0, 0.0);
    for &t in &times {
        let count = |g: &[Outcome]| {
            let n = g.iter().filter(|o| o.time >= t).count() as f64;
            let d = g.iter().filter(|o| o.time == t && o.event).count() as f64;
            (n, d)
        };
        let (na, da) = count(a);
        let (nb, db) = count(b);
        let n = na + nb;
        let d = da + db;
        o_minus_e += da - d * na / n;
        if n > 1.0 {
            var += d * (na / n) * (nb / n) * (n - d) / (n - 1.0);
        }
    }
    if var <= 0.0 {
        return Err(Error::DegenerateTest("log-rank variance is zero".into()));
    }
    let chi_square = o_minus_e * o_minus_e / var;
    Ok(LogRank {
        chi_square,
        p: chi_square_sf_1dof(chi_square),
    })
}

/// Upper tail of the chi-square distribution with one degree of freedom.
pub fn chi_square_sf_1dof(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    gamma_q(0.5, x / 2.0)
}

/// Regularized upper incomplete gamma `Q(a, x)`.
pub fn gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < a + 1.0 {
        1.0 - gamma_p_series(a, x)
    } else {
        gamma_q_cf(a, x)
    }
}

fn gamma_p_series(a: f64, x: f64) -> f64 {
    let mut ap = a;
    let mut del = 1.0 / a;
    let mut sum = del;
    for _ in 0..1000 {
        ap += 1.0;
        del *= x / ap;
        sum += del;
        if del.abs() < sum.abs() * 1e-17 {
            break;
        }
    }
    sum * (-x + a * x.ln() - ln_gamma(a)).exp()
}

// Modified Lentz evaluation of the continued fraction.
fn gamma_q_cf(a: f64, x: f64) -> f64 {
    let tiny = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / tiny;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..1000 {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < tiny {
            d = tiny;
        }
        c = b + an / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-x + a * x.ln() - ln_gamma(a)).exp() * h
}

/// Lanczos approximation (g = 7, n = 9).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        return (std::f64::consts::PI / (std::f64::consts::PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, &c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Splits subjects at the median score: strictly above goes to the high-risk
/// group, everything else (including ties at the median) to low risk.
/// Returns `(high, low)` index lists in input order.
pub fn median_split(scores: &[f64]) -> Result<(Vec<usize>, Vec<usize>)> {
    if scores.len() < 2 {
        return Err(Error::Contract("median split needs at least two subjects".into()));
    }
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let median = if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) };
    Ok((0..n).partition(|&i| scores[i] > median))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn oc(t: &[f64], e: &[bool]) -> Vec<Outcome> {
        t.iter().zip(e).map(|(&time, &event)| Outcome { time, event }).collect()
    }

    fn brute_ci(b: &RiskBatch) -> Option<f64> {
        let (mut num, mut den) = (0.0, 0u64);
        for i in 0..b.len() {
            for j in 0..b.len() {
                let (oi, oj) = (b.outcomes[i], b.outcomes[j]);
                if oi.event && oi.time < oj.time {
                    den += 1;
                    if b.scores[i] > b.scores[j] {
                        num += 1.0;
                    } else if b.scores[i] == b.scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        (den > 0).then(|| num / den as f64)
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, censor: f64, coarse: bool) -> RiskBatch {
        let scores = (0..n)
            .map(|_| if coarse { rng.random_range(0..5) as f64 } else { rng.random::<f64>() })
            .collect();
        let outcomes = (0..n)
            .map(|_| Outcome {
                time: if coarse { rng.random_range(1..20) as f64 } else { 0.1 + rng.random::<f64>() * 10.0 },
                event: rng.random::<f64>() >= censor,
            })
            .collect();
        RiskBatch::new(scores, outcomes).unwrap()
    }

    #[test]
    fn ci_examples() {
        let o = oc(&[1.0, 2.0, 3.0], &[true, true, true]);
        assert_eq!(concordance_index(&RiskBatch::new(vec![3.0, 2.0, 1.0], o.clone()).unwrap()).unwrap(), 1.0);
        assert_eq!(concordance_index(&RiskBatch::new(vec![2.0, 2.0, 2.0], o).unwrap()).unwrap(), 0.5);
        let none = RiskBatch::new(vec![1.0, 2.0], oc(&[1.0, 2.0], &[false, false])).unwrap();
        assert!(matches!(concordance_index(&none), Err(Error::UndefinedMetric(_))));
        let same_t = RiskBatch::new(vec![1.0, 2.0], oc(&[2.0, 2.0], &[true, true])).unwrap();
        assert!(concordance_index(&same_t).is_err());
    }

    #[test]
    fn ci_equals_pair_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = random_batch(&mut rng, 200, 0.3, false);
        assert_eq!(concordance_index(&b).unwrap(), brute_ci(&b).unwrap());
        for k in 0..60 {
            let n = rng.random_range(2..=300);
            let b = random_batch(&mut rng, n, (k % 4) as f64 * 0.2, k % 2 == 0);
            match brute_ci(&b) {
                Some(v) => assert_eq!(concordance_index(&b).unwrap(), v),
                None => assert!(concordance_index(&b).is_err()),
            }
        }
    }

    #[test]
    fn ci_rank_invariance_and_reflection() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = random_batch(&mut rng, 120, 0.3, false);
        let base = concordance_index(&b).unwrap();
        let mono = RiskBatch::new(b.scores.iter().map(|h| (3.0 * h).exp() - 2.0).collect(), b.outcomes.clone()).unwrap();
        assert_eq!(concordance_index(&mono).unwrap(), base);
        let neg = RiskBatch::new(b.scores.iter().map(|h| -h).collect(), b.outcomes.clone()).unwrap();
        assert!((concordance_index(&neg).unwrap() + base - 1.0).abs() < 1e-12);
    }

    #[test]
    fn km_hand_table() {
        let o = oc(&[1.0, 2.0, 3.0, 4.0], &[true, false, true, false]);
        let km = kaplan_meier(&o);
        assert_eq!(km.times, vec![1.0, 3.0]);
        assert_eq!(km.at_risk, vec![4, 2]);
        assert!((km.at(1.0) - 0.75).abs() < 1e-15);
        assert!((km.at(2.5) - 0.75).abs() < 1e-15);
        assert!((km.at(3.0) - 0.375).abs() < 1e-15);
        assert_eq!(km.at(0.5), 1.0);
        assert!(km.to_csv().starts_with("time,survival,at_risk,events\n1,0.75,4,1\n"));
    }

    #[test]
    fn km_edge_cases() {
        let censored = kaplan_meier(&oc(&[1.0, 2.0], &[false, false]));
        assert!(censored.times.is_empty());
        assert_eq!(censored.at(10.0), 1.0);
        let full = kaplan_meier(&oc(&[1.0, 2.0, 3.0, 4.0, 5.0], &[true; 5]));
        for (k, s) in full.survival.iter().enumerate() {
            assert!((s - (1.0 - (k + 1) as f64 / 5.0)).abs() < 1e-15);
        }
        assert_eq!(*full.survival.last().unwrap(), 0.0);
        let svg = km_svg(&[("all", &full)]);
        assert!(svg.starts_with("<svg") && svg.contains("all"));
    }

    #[test]
    fn log_rank_identical_groups() {
        let o = oc(&[1.0, 2.0, 3.0, 4.0, 5.0], &[true, false, true, true, false]);
        let r = log_rank_test(&o, &o).unwrap();
        assert_eq!(r.chi_square, 0.0);
        assert_eq!(r.p, 1.0);
        let (single, pooled) = (kaplan_meier(&o), kaplan_meier(&[o.clone(), o.clone()].concat()));
        assert_eq!((&single.times, &single.survival), (&pooled.times, &pooled.survival));
        let none = oc(&[1.0, 2.0], &[false, false]);
        assert!(matches!(log_rank_test(&none, &none), Err(Error::DegenerateTest(_))));
    }

    #[test]
    fn log_rank_separated_groups() {
        let a: Vec<Outcome> = (0..40).map(|i| Outcome { time: 1.0 + i as f64 * 0.1, event: true }).collect();
        let b: Vec<Outcome> = (0..40).map(|i| Outcome { time: 10.0 + i as f64, event: i % 2 == 0 }).collect();
        let r = log_rank_test(&a, &b).unwrap();
        assert!(r.p < 0.01, "{r:?}");
    }

    /// `P(chi2_1 > x) = 2 (1 - Phi(sqrt x))`, with the normal integral done
    /// by composite Simpson quadrature.
    fn chi2_sf_quadrature(x: f64) -> f64 {
        let b = x.sqrt();
        let n = 20000;
        let h = b / n as f64;
        let f = |u: f64| (-u * u / 2.0).exp();
        let mut s = f(0.0) + f(b);
        for i in 1..n {
            s += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        let integral = s * h / 3.0 / (2.0 * std::f64::consts::PI).sqrt();
        1.0 - 2.0 * integral
    }

    #[test]
    fn chi_square_tail_matches_quadrature() {
        assert!((chi_square_sf_1dof(3.841) - 0.05).abs() < 1e-3);
        for x in [0.01, 0.5, 1.0, 2.7, 3.841, 6.63, 10.0, 25.0] {
            assert!((chi_square_sf_1dof(x) - chi2_sf_quadrature(x)).abs() < 1e-10, "x={x}");
        }
        assert_eq!(chi_square_sf_1dof(0.0), 1.0);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-14);
        assert!((ln_gamma(5.0) - 24f64.ln()).abs() < 1e-13);
    }

    #[test]
    fn median_split_rules() {
        assert_eq!(median_split(&[1.0, 2.0, 3.0, 4.0]).unwrap(), (vec![2, 3], vec![0, 1]));
        assert_eq!(median_split(&[1.0, 2.0, 3.0]).unwrap(), (vec![2], vec![0, 1]));
        assert_eq!(median_split(&[5.0; 4]).unwrap(), (vec![], vec![0, 1, 2, 3]));
        assert!(median_split(&[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn km_is_monotone_and_bounded(ts in prop::collection::vec((1u32..50, any::<bool>()), 1..60)) {
            let o: Vec<Outcome> = ts.iter().map(|&(t, e)| Outcome { time: t as f64, event: e }).collect();
            let km = kaplan_meier(&o);
            let mut prev = 1.0;
            for &s in &km.survival {
                prop_assert!((0.0..=prev).contains(&s));
                prev = s;
            }
        }
    }
}
