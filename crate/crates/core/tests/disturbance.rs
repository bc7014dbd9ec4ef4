use bgfd::gndd::{compute_stats, disturb, disturbance, NoiseSchedule, NoiseSource, TimeLabel};
use bgfd::Tensor;

fn full_weight() -> NoiseSchedule {
    NoiseSchedule {
        forward_passes: 50,
        total_iterations: 50,
        lambda: 1.0,
    }
}

#[test]
fn disturbed_copies_average_to_the_image_mean() {
    let f = Tensor::from_fn([1, 2, 3, 3], |_, c, y, x| (c * 9 + y * 3 + x) as f64 * 0.25 - 1.0);
    let st = compute_stats(&f, TimeLabel::A, 1).unwrap()[0];
    let copies = 10_000;
    let mut mean = vec![0.0; f.numel()];
    for pass in 0..copies {
        let sched = NoiseSchedule {
            forward_passes: 50 + pass,
            ..full_weight()
        };
        let out = disturb(&f, TimeLabel::A, 1, &sched, &NoiseSource::new(17), true).unwrap();
        for ((m, o), i) in mean.iter_mut().zip(out.data()).zip(f.data()) {
            *m += (o - i) / copies as f64;
        }
    }
    // 3 sigma for the pooled mean; per pixel the band widens for 18 simultaneous comparisons.
    let se = st.sigma / (copies as f64).sqrt();
    let pooled = mean.iter().sum::<f64>() / mean.len() as f64;
    assert!(
        (pooled - st.mu).abs() <= 3.0 * se / (mean.len() as f64).sqrt(),
        "{pooled} vs {}",
        st.mu
    );
    for m in mean {
        assert!((m - st.mu).abs() <= 4.5 * se, "{m} vs {}", st.mu);
    }
}

#[test]
fn constant_image_doubles() {
    let f = Tensor::full([2, 3, 2, 2], 1.5);
    let out = disturb(&f, TimeLabel::B, 0, &full_weight(), &NoiseSource::new(3), true).unwrap();
    assert!(out.data().iter().all(|&v| v == 3.0));
}

#[test]
fn zero_weight_draws_nothing() {
    let f = Tensor::from_fn([1, 1, 2, 2], |_, _, y, x| (y + x) as f64);
    let sched = NoiseSchedule::new(10, 1.0).unwrap();
    assert!(disturbance(&f, TimeLabel::A, 0, &sched, &NoiseSource::new(0), true)
        .unwrap()
        .is_none());
    assert_eq!(disturb(&f, TimeLabel::A, 0, &sched, &NoiseSource::new(0), true).unwrap(), f);
}

#[test]
fn images_draw_independently_of_batch_composition() {
    let f = Tensor::from_fn([3, 2, 4, 4], |n, c, y, x| ((n * 7 + c * 5 + y * 3 + x) % 11) as f64);
    let src = NoiseSource::new(99);
    let whole = disturbance(&f, TimeLabel::B, 3, &full_weight(), &src, true).unwrap().unwrap();
    let first = disturbance(&f.slice_batch(0, 1).unwrap(), TimeLabel::B, 3, &full_weight(), &src, true)
        .unwrap()
        .unwrap();
    assert_eq!(whole.image(0), first.image(0));
    assert_ne!(whole.image(0), whole.image(1));
}

#[test]
fn streams_differ_by_time_and_scale() {
    let f = Tensor::from_fn([1, 1, 4, 4], |_, _, y, x| (y * 4 + x) as f64);
    let src = NoiseSource::new(5);
    let draw = |t, s| disturb(&f, t, s, &full_weight(), &src, true).unwrap();
    assert_ne!(draw(TimeLabel::A, 0), draw(TimeLabel::B, 0));
    assert_ne!(draw(TimeLabel::A, 0), draw(TimeLabel::A, 1));
    assert_eq!(draw(TimeLabel::A, 2), draw(TimeLabel::A, 2));
}
