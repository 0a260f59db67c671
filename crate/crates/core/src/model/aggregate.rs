use crate::{Error, Result};

/// Weighted entrywise mean, weights normalized to sum to one.
pub fn fedavg<V: AsRef<[f64]>>(contributions: &[(V, f64)]) -> Result<Vec<f64>> {
    let Some((first, _)) = contributions.first() else {
        return Err(Error::Aggregation("no contributions to aggregate".into()));
    };
    let len = first.as_ref().len();
    let mut total = 0.0;
    for (v, w) in contributions {
        if v.as_ref().len() != len {
            return Err(Error::Contract(format!(
                "contribution of length {} does not match length {len}",
                v.as_ref().len()
            )));
        }
        if !(*w > 0.0 && w.is_finite()) {
            return Err(Error::Contract(format!("aggregation weight {w} is not positive")));
        }
        total += w;
    }
    let mut out = vec![0.0; len];
    for (v, w) in contributions {
        let share = w / total;
        for (o, x) in out.iter_mut().zip(v.as_ref()) {
            *o += share * x;
        }
    }
    Ok(out)
}

/// `dot(a, b) / (|a| |b|)`, clamped to `[-1, 1]`. `None` when either vector
/// has zero norm.
///
/// # Panics
/// If the vectors differ in length.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len(), "cosine similarity of vectors with different lengths");
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fedavg_examples() {
        let v = vec![0.5, -1.0, 3.0];
        let out = fedavg(&[(&v, 1.0), (&v, 2.0), (&v, 7.0)]).unwrap();
        for (o, x) in out.iter().zip(&v) {
            assert!((o - x).abs() < 1e-15);
        }
        assert_eq!(fedavg(&[(vec![0.0; 4], 1.0), (vec![2.0; 4], 1.0)]).unwrap(), vec![1.0; 4]);

        let a = [1.0, -2.0, 4.0];
        let b = [3.0, 0.0, -8.0];
        let out = fedavg(&[(a, 1.0), (b, 3.0)]).unwrap();
        for i in 0..3 {
            assert!((out[i] - (0.25 * a[i] + 0.75 * b[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn fedavg_errors() {
        assert!(matches!(fedavg::<Vec<f64>>(&[]), Err(Error::Aggregation(_))));
        assert!(matches!(
            fedavg(&[(vec![1.0], 1.0), (vec![1.0, 2.0], 1.0)]),
            Err(Error::Contract(_))
        ));
        assert!(matches!(fedavg(&[(vec![1.0], 0.0)]), Err(Error::Contract(_))));
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]), Some(1.0));
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]), Some(0.0));
        let c = cosine_similarity(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert!((c - 0.974_631_846).abs() < 1e-9);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 2.0]), None);
        assert_eq!(cosine_similarity(&[1.0, 2.0], &[0.0, 0.0]), None);
    }

    proptest! {
        #[test]
        fn fedavg_stays_in_envelope(
            rows in prop::collection::vec((prop::collection::vec(-100.0f64..100.0, 5), 0.01f64..10.0), 1..8)
        ) {
            let out = fedavg(&rows).unwrap();
            for i in 0..5 {
                let lo = rows.iter().map(|(v, _)| v[i]).fold(f64::INFINITY, f64::min);
                let hi = rows.iter().map(|(v, _)| v[i]).fold(f64::NEG_INFINITY, f64::max);
                let slack = 1e-12 * (lo.abs() + hi.abs() + 1.0);
                prop_assert!(out[i] >= lo - slack && out[i] <= hi + slack);
            }
        }

        #[test]
        fn cosine_symmetric_and_scale_invariant(
            a in prop::collection::vec(-10.0f64..10.0, 1..20),
            seed in any::<u64>(),
            scale in 0.001f64..1000.0,
        ) {
            let b: Vec<f64> = a.iter().enumerate()
                .map(|(i, x)| x * 0.5 + ((seed >> (i % 60)) & 7) as f64 - 3.5)
                .collect();
            let ab = cosine_similarity(&a, &b);
            prop_assert_eq!(ab, cosine_similarity(&b, &a));
            if let Some(ab) = ab {
                prop_assert!((-1.0..=1.0).contains(&ab));
                let scaled: Vec<f64> = a.iter().map(|x| x * scale).collect();
                let s = cosine_similarity(&scaled, &b).unwrap();
                prop_assert!((s - ab).abs() < 1e-12);
            }
        }
    }
}
