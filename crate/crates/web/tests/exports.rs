use patchsae_web::{probe, schedules};

#[test]
fn schedule_export_is_json() {
    let text = schedules(0.001, 0.01, 5, 50, 6).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["steps"].as_array().unwrap().len(), 6);
    assert_eq!(v["lambda"][5].as_f64(), Some(0.01));
}

#[test]
fn probe_export_reports_ap_in_unit_interval() {
    let v: serde_json::Value = serde_json::from_str(&probe(1.5, 0.2, 500, 3).unwrap()).unwrap();
    let ap = v["ap"].as_f64().unwrap();
    assert!(ap > 0.2 && ap <= 1.0);
    assert_eq!(v["pr_curve"].as_array().unwrap().len(), 100);
}
