#![allow(dead_code)]

use ocvkit::config::RunConfig;

/// R-int cell (R0 = 0.1 Ohm) whose EMF is the reference Combined+3 curve over
/// true SOC 0.02..0.98, limits derived from the window.
pub fn generative(hysteresis: &str, value: f64, noise_v: f64) -> RunConfig {
    let text = format!(
        "seed = 2024\n\
         [cell]\n\
         cell_id = \"gen\"\n\
         capacity_As = 14400.0\n\
         r_ohmic_Ohm = 0.1\n\
         r_sei_Ohm = 0.0\n\
         r_ct_Ohm = 0.0\n\
         hysteresis = \"{hysteresis}\"\n\
         hysteresis_value = {value:?}\n\
         true_ocv = \"combined3\"\n\
         noise_std_V = {noise_v:?}\n"
    );
    RunConfig::parse(&text, "generative").unwrap()
}

pub fn default_noiseless() -> RunConfig {
    let mut cfg = RunConfig::default_config();
    cfg.cell.noise_std_v = 0.0;
    cfg
}

pub fn max_rel_err(got: &[f64], want: &[f64]) -> f64 {
    got.iter()
        .zip(want)
        .map(|(g, w)| ((g - w) / w).abs())
        .fold(0.0, f64::max)
}
