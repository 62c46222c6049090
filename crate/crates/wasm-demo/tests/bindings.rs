use butterfly_wasm_demo::{autoencode_sweep_json, butterfly_matrix_json, jl_curve_json};
use serde_json::Value;

fn parse(s: &str) -> Value {
    serde_json::from_str(s).unwrap()
}

#[test]
fn fjlt_matrix_entries_are_signed_constants() {
    let v = parse(&butterfly_matrix_json("fjlt", 16, 4, 1).unwrap());
    assert_eq!(v["rows"], 4);
    assert_eq!(v["cols"], 16);
    let data = v["data"].as_array().unwrap();
    assert_eq!(data.len(), 64);
    for x in data {
        assert!((x.as_f64().unwrap().abs() - 0.5).abs() < 1e-12);
    }
}

#[test]
fn hadamard_full_has_all_weights() {
    let v = parse(&butterfly_matrix_json("hadamard", 8, 8, 0).unwrap());
    assert_eq!(v["effective_weights"], 2 * 8 * 3);
}

#[test]
fn bad_inputs_are_errors() {
    assert!(butterfly_matrix_json("nope", 8, 4, 0).is_err());
    assert!(butterfly_matrix_json("fjlt", 8, 9, 0).is_err());
    assert!(butterfly_matrix_json("fjlt", 10_000, 4, 0).is_err());
    assert!(jl_curve_json(16, 1.5, 100, 0).is_err());
}

#[test]
fn jl_curve_covers_powers_of_two_and_ends_exact() {
    let v = parse(&jl_curve_json(16, 0.5, 100, 3).unwrap());
    let pts = v.as_array().unwrap();
    let ells: Vec<u64> = pts.iter().map(|p| p["ell"].as_u64().unwrap()).collect();
    assert_eq!(ells, vec![1, 2, 4, 8, 16]);
    let last = pts.last().unwrap();
    assert_eq!(last["failure_rate"], 0.0);
    assert_eq!(last["norm_failure_rate"], 0.0);
}

#[test]
fn sweep_losses_never_beat_pca() {
    let v = parse(&autoencode_sweep_json(8, 3, 100, 5).unwrap());
    let tr = v["trace_xx"].as_f64().unwrap();
    for p in v["points"].as_array().unwrap() {
        let loss = p["butterfly_loss"].as_f64().unwrap();
        let pca = p["pca_loss"].as_f64().unwrap();
        assert!(loss >= pca - 1e-9 * (1.0 + tr), "{p}");
        assert!(p["fjlt_pca_loss"].as_f64().unwrap() >= pca - 1e-9 * (1.0 + tr));
    }
}

#[test]
fn outputs_are_deterministic() {
    assert_eq!(jl_curve_json(8, 0.3, 100, 9), jl_curve_json(8, 0.3, 100, 9));
    assert_eq!(
        butterfly_matrix_json("random", 8, 5, 2),
        butterfly_matrix_json("random", 8, 5, 2)
    );
}
