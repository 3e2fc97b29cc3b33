use adlab::experiments::ExperimentKind;

use crate::exit::Failure;

/// `(field, type, meaning)` of every experiment setting.
pub const SCHEMA: [(&str, &str, &str); 20] = [
    ("dim", "integer 1..=3", "spatial dimension of the unit cube"),
    ("res", "integer >= 2", "grid cells per axis"),
    ("m_model", "integer > 0", "features of the model kernel or discriminator"),
    ("m_kernel", "integer > 0", "features of the reference kernel and probe ensemble"),
    ("n_list", "array of integers > 0", "sample sizes"),
    ("seeds", "integer > 0", "replicates per sample size"),
    ("c", "float > 0", "friction of the one-time-scale dynamics"),
    ("delta", "float in (0,1)", "failure probability of the high-probability bounds"),
    ("t_grid", "array of increasing floats > 0", "recorded times"),
    ("early_stop_rule", "\"bound_minimizer\" | \"rate_schedule\"", "how the stopping time T(n) is chosen"),
    ("output_dir", "string, optional", "directory for this experiment's CSV"),
    ("profile_exponent", "float > 0", "coefficient-profile exponent of the target construction"),
    ("target_scale", "float >= 0, optional", "requested target perturbation scale; absent = largest admissible"),
    ("m_list", "array of integers > 0", "ensemble sizes of the finite-neuron sweep"),
    ("trials", "integer > 0", "operator-gap draws per ensemble size"),
    ("eps_ladder", "array of decreasing floats > 0", "mollifier radii in cell widths"),
    ("penalty", "float >= 0", "Lipschitz-penalty weight"),
    ("ascent_dt", "float > 0", "subgradient-ascent step"),
    ("ascent_steps", "integer > 0", "largest number of ascent steps"),
    ("loss_ceiling", "float > 0", "objective value treated as divergence"),
];

pub fn describe(name: &str) -> Result<String, Failure> {
    let kind = ExperimentKind::from_name(name).ok_or_else(|| {
        Failure::schema(format!("unknown experiment \"{name}\"; known: {}", crate::config::known_names()))
    })?;
    let mut out = String::new();
    out.push_str(&format!("experiment: {}\n", kind.name()));
    out.push_str(&format!("anchor: {}\n", kind.anchor()));
    out.push_str(&format!("bound: {}\n\n", kind.bound()));
    out.push_str("config schema ([experiment.<name>] table):\n");
    for (field, ty, doc) in SCHEMA {
        out.push_str(&format!("  {field:<17} {ty:<36} {doc}\n"));
    }
    out.push_str("\ndefaults:\n");
    let defaults = toml::to_string(&kind.defaults()).expect("defaults serialize");
    for line in defaults.lines() {
        out.push_str(&format!("  {line}\n"));
    }
    out.push_str("\ncolumns:\n");
    for c in kind.columns() {
        out.push_str(&format!("  {:<15} {}\n", c.name, c.doc));
    }
    Ok(out)
}
