use super::{ProtocolError, Result};
use crate::model::ParamSet;
use crate::tensor::Tensor;

/// Elementwise mean of same-layout parameter sets.
///
/// Each element is summed in `f64` over its values sorted ascending, so the
/// result does not depend on the order of `sets`. With `weights`, the mean is
/// weighted and normalised by the weight total.
pub fn fedavg(sets: &[&ParamSet], weights: Option<&[f64]>) -> Result<ParamSet> {
    let first = *sets
        .first()
        .ok_or_else(|| ProtocolError::Config("fedavg needs at least one parameter set".into()))?;
    if let Some(w) = weights {
        if w.len() != sets.len() {
            return Err(ProtocolError::Config(format!(
                "{} weights for {} sets",
                w.len(),
                sets.len()
            )));
        }
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) || w.iter().sum::<f64>() <= 0.0 {
            return Err(ProtocolError::Config(
                "fedavg weights must be non-negative with a positive sum".into(),
            ));
        }
    }
    if let Some(bad) = sets
        .iter()
        .position(|s| !s.same_layout(first) || s.role() != first.role())
    {
        return Err(ProtocolError::Config(format!(
            "parameter set {bad} does not match the registry layout"
        )));
    }
    let mut entries = Vec::with_capacity(first.len());
    let mut column: Vec<(f32, f64)> = Vec::with_capacity(sets.len());
    for (idx, (name, value)) in first.values().enumerate() {
        let sources: Vec<&[f32]> = sets
            .iter()
            .map(|s| s.values().nth(idx).expect("same layout").1.data())
            .collect();
        let mut data = Vec::with_capacity(value.numel());
        for e in 0..value.numel() {
            column.clear();
            column.extend(
                sources
                    .iter()
                    .enumerate()
                    .map(|(k, src)| (src[e], weights.map_or(1.0, |w| w[k]))),
            );
            column.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
            let (num, den) = column.iter().fold((0.0f64, 0.0f64), |(n, d), &(x, w)| {
                (n + w * f64::from(x), d + w)
            });
            data.push((num / den) as f32);
        }
        entries.push((name.to_string(), Tensor::new(value.shape().to_vec(), data)?));
    }
    Ok(ParamSet::from_entries(first.role(), first.task(), entries)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Role;

    fn set(v: &[f32]) -> ParamSet {
        ParamSet::from_entries(
            Role::Head,
            None,
            [(
                "head.theta".to_string(),
                Tensor::new(vec![v.len()], v.to_vec()).unwrap(),
            )],
        )
        .unwrap()
    }

    #[test]
    fn mean_of_two() {
        let out = fedavg(&[&set(&[1.0]), &set(&[3.0])], None).unwrap();
        assert_eq!(out.value("head.theta").unwrap().data(), &[2.0]);
    }

    #[test]
    fn idempotent_and_order_free() {
        let w = set(&[0.1, -7.3, 1e-3]);
        assert_eq!(fedavg(&[&w, &w, &w], None).unwrap(), w);
        let a = set(&[0.1, 2.0, 1e8]);
        let b = set(&[0.7, -3.0, 1.0]);
        let c = set(&[1e-8, 5.5, -1e8]);
        assert_eq!(
            fedavg(&[&a, &b, &c], None).unwrap(),
            fedavg(&[&c, &a, &b], None).unwrap()
        );
    }

    #[test]
    fn weighted_mean_and_errors() {
        let out = fedavg(&[&set(&[0.0]), &set(&[4.0])], Some(&[3.0, 1.0])).unwrap();
        assert_eq!(out.value("head.theta").unwrap().data(), &[1.0]);
        assert!(fedavg(&[], None).is_err());
        assert!(fedavg(&[&set(&[1.0]), &set(&[1.0, 2.0])], None).is_err());
        assert!(fedavg(&[&set(&[1.0])], Some(&[0.0])).is_err());
    }
}
