use bmetrics_web::{df_vs_noise_json, metric_heatmap_json, train_curve_json, MAX_OBS};
use serde_json::Value;

fn parse(s: String) -> Value {
    serde_json::from_str(&s).unwrap()
}

#[test]
fn bsm_heatmap_collapses_noise() {
    let h = parse(metric_heatmap_json(3, 3, 2, "bsm", 0.9).unwrap());
    assert_eq!(h["values"].as_array().unwrap().len(), 6);
    assert!(h["max_same_state"].as_f64().unwrap() <= 1e-8);
}

#[test]
fn heatmap_rejects_large_or_unknown() {
    assert!(metric_heatmap_json(0, MAX_OBS, 2, "bsm", 0.9).is_err());
    assert!(metric_heatmap_json(0, 2, 2, "cosine", 0.9).is_err());
}

#[test]
fn noise_sweep_rows() {
    let rows = parse(df_vs_noise_json(1, &[0.0, 2.0], 4).unwrap());
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 2);
    for r in rows {
        assert_eq!(r["oracle"], 1.0);
        assert!(r["random_encoder"].as_f64().unwrap() <= 1.0);
    }
}

#[test]
fn short_training_curve() {
    let c = parse(train_curve_json(0, "mico", 60, 30).unwrap());
    assert_eq!(c["steps"], serde_json::json!([0, 30, 60]));
    assert_eq!(c["df"].as_array().unwrap().len(), 3);
    assert!(train_curve_json(0, "nope", 10, 5).is_err());
}
