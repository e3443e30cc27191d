use super::{canonical, ClientUpdate};
use crate::error::Result;
use crate::model::ParameterVector;

/// Example-count-weighted mean of deltas: `sum(w_i * d_i) / sum(w_i)`,
/// summed in client-id order.
pub fn fedavg(updates: &[ClientUpdate]) -> Result<ParameterVector> {
    let sorted = canonical(updates)?;
    let dims = sorted[0].delta.dims();
    let total: f64 = sorted.iter().map(|u| u.weight).sum();
    let mut acc = ParameterVector::zeros(dims);
    for u in &sorted {
        acc.add_scaled(u.weight, &u.delta);
    }
    acc.scale(1.0 / total);
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::super::update;
    use super::*;
    use crate::error::FedError;

    #[test]
    fn weighted_mean() {
        let ups = [
            update("a", 1.0, vec![1.0, 1.0]),
            update("b", 3.0, vec![5.0, 5.0]),
        ];
        assert_eq!(fedavg(&ups).unwrap().as_slice(), &[4.0, 4.0]);
    }

    #[test]
    fn single_update_identity() {
        let ups = [update("a", 7.0, vec![0.1, -2.0, 3.5])];
        assert_eq!(fedavg(&ups).unwrap().as_slice(), &[0.1, -2.0, 3.5]);
    }

    #[test]
    fn empty_and_bad_weight() {
        assert!(matches!(fedavg(&[]), Err(FedError::EmptyUpdates)));
        assert!(matches!(
            fedavg(&[update("a", 0.0, vec![1.0])]),
            Err(FedError::InvalidWeight { .. })
        ));
        assert!(matches!(
            fedavg(&[update("a", -1.0, vec![1.0])]),
            Err(FedError::InvalidWeight { .. })
        ));
    }

    #[test]
    fn order_does_not_matter() {
        let a = update("a", 1.3, vec![0.1, 0.7]);
        let b = update("b", 2.9, vec![-0.3, 1.1]);
        let c = update("c", 0.4, vec![5.0, -2.2]);
        let x = fedavg(&[a.clone(), b.clone(), c.clone()]).unwrap();
        let y = fedavg(&[c, a, b]).unwrap();
        assert_eq!(x.to_le_bytes(), y.to_le_bytes());
    }
}
