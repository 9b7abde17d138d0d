//! Wire encoding of simulation samples as channel updates.

use dpi_core::SimSample;

pub const UPDATE_PATH: &str = "/update";

/// Number of numeric fields a channel carries.
pub const FIELD_COUNT: usize = 8;

/// Renders a value with three decimals; negative zero prints as `0.000`.
pub fn format_field(x: f64) -> String {
    let s = format!("{x:.3}");
    if s == "-0.000" {
        "0.000".into()
    } else {
        s
    }
}

/// Field values in the fixed order: temperature, setpoint, PV, load, battery.
pub fn sample_fields(sample: &SimSample) -> [f64; 5] {
    [sample.temperature, sample.p_set, sample.p_pv, sample.p_load, sample.p_batt]
}

/// `api_key` followed by `field1..field5`.
pub fn update_params(sample: &SimSample, write_key: &str) -> Vec<(String, String)> {
    let mut params = vec![("api_key".to_string(), write_key.to_string())];
    for (i, v) in sample_fields(sample).iter().enumerate() {
        params.push((format!("field{}", i + 1), format_field(*v)));
    }
    params
}

/// Path and query string of the update request, e.g.
/// `/update?api_key=K&field1=31.000&...`.
pub fn encode_update(sample: &SimSample, write_key: &str) -> String {
    let query = form_urlencoded::Serializer::new(String::new()).extend_pairs(update_params(sample, write_key)).finish();
    format!("{UPDATE_PATH}?{query}")
}
