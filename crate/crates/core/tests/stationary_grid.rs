use eco_core::theory::{closed_form_moments, iterate_moments, regime_coeffs, stability_check, Regime1d};

#[test]
fn closed_form_matches_fixed_point_on_grid() {
    let ls = [0.5, 1.0, 2.0, 4.0];
    let etas = [0.01, 0.03, 0.1, 0.2, 0.4];
    let betas = [0.1, 0.3, 0.5, 0.7, 0.9];
    let mut points = 0;
    let mut worst = 0.0f64;
    for (i, &l) in ls.iter().enumerate() {
        for &eta in &etas {
            for &beta in &betas {
                assert!(stability_check(l, eta, beta));
                points += 1;
                let sigma2 = if (i + points) % 2 == 0 { 0.1 } else { 1.0 };
                for regime in Regime1d::ALL {
                    let closed = closed_form_moments(regime, l, eta, beta, sigma2).unwrap();
                    let co = regime_coeffs(regime, l, eta, beta).unwrap();
                    let (iterated, _) = iterate_moments(&co, sigma2, 1e-14).unwrap();
                    let diff = (closed.u - iterated.u).abs();
                    worst = worst.max(diff);
                    assert!(
                        diff <= 1e-10,
                        "{} L={l} eta={eta} beta={beta}: {} vs {}",
                        regime.name(),
                        closed.u,
                        iterated.u
                    );
                }
            }
        }
    }
    assert_eq!(points, 100);
    assert!(worst.is_finite());
}
