//! Flat `key = value` serialization of the reports.
//!
//! Floats use Rust's shortest round-trip formatting, so identical values give
//! identical bytes.

use std::fmt::Display;
use std::io::Write;

use crate::adjoint::MpReport;
use crate::bsde::BackwardSolution;
use crate::connect::{DualityReport, VerificationReport};
use crate::hjb::{GridValueFunction, X2Check};
use crate::scalar::Scalar;
use crate::smdde::{ComparisonReport, MomentEstimate};
use crate::variational::ScalingReport;

/// Ordered key-value pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues(pub Vec<(String, String)>);

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put(&mut self, k: impl Into<String>, v: impl Display) -> &mut Self {
        self.0.push((k.into(), v.to_string()));
        self
    }

    pub fn opt(&mut self, k: impl Into<String>, v: Option<impl Display>) -> &mut Self {
        match v {
            Some(v) => self.put(k, v),
            None => self.put(k, "NA"),
        }
    }

    pub fn get(&self, k: &str) -> Option<&str> {
        self.0.iter().find(|(a, _)| a == k).map(|(_, v)| v.as_str())
    }

    pub fn extend_prefixed(&mut self, prefix: &str, other: &KeyValues) -> &mut Self {
        for (k, v) in &other.0 {
            self.0.push((format!("{prefix}.{k}"), v.clone()));
        }
        self
    }

    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (k, v) in &self.0 {
            // Values stay on one line.
            writeln!(w, "{k} = {}", v.replace('\n', " "))?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = Vec::new();
        self.write(&mut out).expect("writing to memory");
        String::from_utf8(out).expect("utf-8")
    }
}

/// Types that render as a flat key-value block.
pub trait ToKeyValues {
    fn to_kv(&self) -> KeyValues;
}

impl ToKeyValues for MpReport {
    fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.put("verdict", self.verdict())
            .put("convexity_ok", self.convexity_ok)
            .put("convexity_worst", self.convexity_worst)
            .opt("convexity_witness", self.convexity_witness.as_ref())
            .put("phi_linear_ok", self.phi_linear_ok)
            .put("phi_m", self.phi_m)
            .put("phi_n", self.phi_n)
            .put("phi_residual", self.phi_residual)
            .put("p3_zero_ok", self.p3_zero_ok)
            .put("p3_max", self.p3_max)
            .put("p3_tol", self.p3_tol)
            .put("variational_ok", self.variational_ok)
            .put("variational_worst", self.variational_worst)
            .put("hu_scale", self.hu_scale)
            .opt("variational_witness", self.variational_witness.as_ref());
        kv
    }
}

impl ToKeyValues for DualityReport {
    fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.put("applicable", self.applicable)
            .put("p3_max", self.p3_max)
            .put("records", self.records.len())
            .put("skipped", self.skipped)
            .put("coverage", self.coverage)
            .put("super_fraction", self.super_fraction)
            .put("sub_fraction_smooth", self.sub_fraction_smooth)
            .put("median_rel_err", self.median_rel_err)
            .put("x1_slope_inclusion", "not checked (known not to hold in general)");
        kv
    }
}

impl ToKeyValues for VerificationReport {
    fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.put("verdict", self.verdict)
            .put("statistic", self.statistic)
            .put("statistic_se", self.statistic_se)
            .put("disc_budget", self.disc_budget)
            .put("membership_fraction", self.membership_fraction)
            .put("coverage", self.coverage)
            .put("j", self.j)
            .put("j_se", self.j_se)
            .put("v", self.v)
            .put("gap", self.gap)
            .put("gap_ok", self.gap_ok)
            .put("pointwise_warn_fraction", self.pointwise_warn_fraction);
        kv
    }
}

impl ToKeyValues for ComparisonReport {
    fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.put("hypotheses_ok", self.hypotheses_ok())
            .put("hypothesis_violations", self.hypothesis_violations.join("; "))
            .put("n_paths", self.n_paths)
            .put("tol", self.tol)
            .put("violating_paths", self.violating_paths)
            .put("max_fraction", self.max_fraction())
            .put("worst_gap", self.worst_gap);
        kv
    }
}

impl ToKeyValues for MomentEstimate {
    fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.put("p", self.p)
            .put("lhs", self.lhs)
            .put("lhs_se", self.lhs_se)
            .put("rhs_history", self.rhs_terms[0])
            .put("rhs_drift", self.rhs_terms[1])
            .put("rhs_diffusion", self.rhs_terms[2])
            .put("ratio", self.ratio())
            .put("n_used", self.n_used)
            .put("n_diverged", self.n_diverged);
        kv
    }
}

impl ToKeyValues for BackwardSolution {
    fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.put("y0", self.y0)
            .put("se", self.se)
            .put("j", -self.y0)
            .put("basis_degree", self.basis.degree)
            .put("ridge", self.basis.ridge)
            .put("scheme", format!("{:?}", self.scheme))
            .put("warnings", self.warnings.join("; "));
        kv
    }
}

impl ToKeyValues for ScalingReport {
    fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        for (q, s) in &self.slopes {
            kv.opt(format!("slope.{q}"), s.as_ref());
        }
        kv
    }
}

impl ToKeyValues for X2Check {
    fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.put("pass", self.pass).put("worst", self.worst).opt("witness", self.witness.as_ref());
        kv
    }
}

impl<T: Scalar> ToKeyValues for GridValueFunction<T> {
    fn to_kv(&self) -> KeyValues {
        let c = &self.cfg;
        let mut kv = KeyValues::new();
        kv.put("variant", format!("{:?}", self.variant))
            .put("nx", c.nx)
            .put("nx1", c.nx1)
            .put("n_slices", c.n_slices)
            .put("dx", c.dx())
            .put("dx1", c.dx1())
            .put("dt_pde", c.dt())
            .put("cfl", self.cfl)
            .put("x2_gate_worst", self.x2_gate_worst)
            .put("x2_audit_worst", self.x2_audit_worst)
            .put("x2_coverage", "finite probe set; exact only for G affine in x2")
            .put("stored_slices", self.slices.len())
            .put("warnings", self.warnings.join("; "));
        kv
    }
}
