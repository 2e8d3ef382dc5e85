//! Built-in configurations, one per acceptance check.

macro_rules! presets {
    ($($name:literal),* $(,)?) => {
        /// `(name, configuration text)` pairs.
        pub const PRESETS: &[(&str, &str)] = &[
            $(($name, include_str!(concat!("../../presets/", $name, ".cfg")))),*
        ];
    };
}

presets!(
    "lderivative",
    "ito",
    "path_independence",
    "path_independence_falsified",
    "flow_property",
    "fk_linear",
    "fk_source",
    "fk_log",
    "npde_residual",
    "girsanov",
    "w2_selftest",
    "drift_identity",
);

pub fn preset(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, text)| *text)
}

/// First comment line of a preset.
pub fn description(text: &str) -> &str {
    text.lines()
        .find_map(|l| l.trim().strip_prefix('#'))
        .map_or("", str::trim)
}
