use crate::diffusion::{TrackLatents, TrackSet};
use crate::error::{Error, Result};

fn check(pred: &TrackLatents, truth: &TrackLatents, targets: TrackSet) -> Result<()> {
    truth.check_shape(pred.shape())?;
    if targets.is_empty() {
        return Err(Error::InvalidTask("masked loss needs at least one target".into()));
    }
    if let Some(bad) = targets.iter().find(|&i| i >= pred.shape().tracks) {
        return Err(Error::InvalidTask(format!("target {bad} out of range")));
    }
    Ok(())
}

/// Mean squared error over the target tracks only.
pub fn masked_loss(pred: &TrackLatents, truth: &TrackLatents, targets: TrackSet) -> Result<f64> {
    check(pred, truth, targets)?;
    let mut sum = 0.0;
    for i in targets.iter() {
        sum += pred.track(i).iter().zip(truth.track(i)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(sum / (targets.len() * pred.shape().track_len()) as f64)
}

/// Loss and its gradient with respect to `pred`; non-target entries of the
/// gradient are exactly zero.
pub fn masked_loss_grad(pred: &TrackLatents, truth: &TrackLatents, targets: TrackSet) -> Result<(f64, TrackLatents)> {
    let loss = masked_loss(pred, truth, targets)?;
    let n = (targets.len() * pred.shape().track_len()) as f64;
    let mut grad = TrackLatents::zeros(pred.shape());
    for i in targets.iter() {
        for ((g, a), b) in grad.track_mut(i).iter_mut().zip(pred.track(i)).zip(truth.track(i)) {
            *g = 2.0 * (a - b) / n;
        }
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::LatentShape;
    use crate::rng::seeded;

    #[test]
    fn hand_values() {
        let shape = LatentShape::new(2, 2, 3);
        let truth = TrackLatents::gaussian(shape, &mut seeded(1));
        assert_eq!(masked_loss(&truth, &truth, TrackSet::all(2)).unwrap(), 0.0);
        let mut pred = truth.clone();
        pred.track_mut(1).iter_mut().for_each(|v| *v += 0.5);
        assert!((masked_loss(&pred, &truth, TrackSet::from_indices([1])).unwrap() - 0.25).abs() < 1e-15);
        assert!(masked_loss(&pred, &truth, TrackSet::empty()).is_err());
    }

    #[test]
    fn non_target_channels_are_ignored() {
        let shape = LatentShape::new(3, 2, 4);
        let truth = TrackLatents::gaussian(shape, &mut seeded(1));
        let pred = TrackLatents::gaussian(shape, &mut seeded(2));
        let targets = TrackSet::from_indices([0, 2]);
        let (l0, g0) = masked_loss_grad(&pred, &truth, targets).unwrap();
        let mut moved = pred.clone();
        moved.track_mut(1).iter_mut().for_each(|v| *v = *v * 17.0 - 3.0);
        let (l1, g1) = masked_loss_grad(&moved, &truth, targets).unwrap();
        assert_eq!(l0.to_bits(), l1.to_bits());
        assert_eq!(g0, g1);
        assert!(g0.track(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let shape = LatentShape::new(2, 1, 3);
        let truth = TrackLatents::gaussian(shape, &mut seeded(4));
        let pred = TrackLatents::gaussian(shape, &mut seeded(5));
        let targets = TrackSet::from_indices([1]);
        let (_, g) = masked_loss_grad(&pred, &truth, targets).unwrap();
        for j in 0..shape.len() {
            let mut up = pred.clone();
            up.data_mut()[j] += 1e-6;
            let mut down = pred.clone();
            down.data_mut()[j] -= 1e-6;
            let fd = (masked_loss(&up, &truth, targets).unwrap() - masked_loss(&down, &truth, targets).unwrap()) / 2e-6;
            assert!((fd - g.data()[j]).abs() < 1e-8);
        }
    }
}
