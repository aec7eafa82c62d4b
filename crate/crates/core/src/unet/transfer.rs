use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::model::UNet;
use super::plan::PhantomModel;
use super::spec::{student_spec_with, DropPosition, PruneOptions, UNetSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferReport {
    /// `(student name, teacher name)` pairs.
    pub copied: Vec<(String, String)>,
    /// Teacher parameters with no student counterpart.
    pub dropped: Vec<String>,
    /// Student parameters with no teacher counterpart.
    pub unmatched: Vec<String>,
}

/// Name of the source parameter for `name` under `student`'s origin maps.
/// Names outside remapped blocks map to themselves.
pub fn source_name(student: &UNetSpec, name: &str) -> String {
    let parts: Vec<&str> = name.splitn(5, '.').collect();
    let (path, blocks) = match parts[0] {
        "down_blocks" => ("down_blocks", &student.down_blocks),
        "up_blocks" => ("up_blocks", &student.up_blocks),
        _ => return name.to_string(),
    };
    let Ok(i) = parts[1].parse::<usize>() else {
        return name.to_string();
    };
    let Some(blk) = blocks.get(i) else {
        return name.to_string();
    };
    match (parts[2], parts.get(3).and_then(|s| s.parse::<usize>().ok())) {
        ("resnets" | "attentions", Some(k)) if k < blk.rt_pairs => {
            let (sb, sk) = blk.source_of_pair(i, k);
            format!("{path}.{sb}.{}.{sk}.{}", parts[2], parts[4])
        }
        _ => {
            let sb = blk.source_block(i);
            format!("{path}.{sb}.{}", parts[2..].join("."))
        }
    }
}

/// Copy plan between two specs, checking shapes without any weights.
pub fn plan_transfer(teacher: &UNetSpec, student: &UNetSpec) -> Result<TransferReport> {
    let t = PhantomModel::new(teacher)?;
    let s = PhantomModel::new(student)?;
    let t_shapes = t.shapes();
    let mut report = TransferReport::default();
    let mut used = HashSet::new();
    for e in s.entries() {
        let src = source_name(student, &e.name);
        match t_shapes.get(&src) {
            Some(shape) if *shape == e.shape => {
                used.insert(src.clone());
                report.copied.push((e.name.clone(), src));
            }
            Some(shape) => {
                return Err(Error::Transfer {
                    param: e.name.clone(),
                    reason: format!("student shape {:?} vs teacher `{src}` shape {shape:?}", e.shape),
                })
            }
            None => report.unmatched.push(e.name.clone()),
        }
    }
    report.dropped = t
        .entries()
        .iter()
        .filter(|e| !used.contains(&e.name))
        .map(|e| e.name.clone())
        .collect();
    Ok(report)
}

/// Copies every mapped teacher tensor into the student.
pub fn transfer_weights(teacher: &UNet, student: &mut UNet) -> Result<TransferReport> {
    let report = plan_transfer(teacher.spec(), student.spec())?;
    if let Some(name) = report.unmatched.first() {
        return Err(Error::Transfer {
            param: name.clone(),
            reason: format!("no teacher counterpart ({} unmatched in total)", report.unmatched.len()),
        });
    }
    for (dst, src) in &report.copied {
        let value = teacher.params().get(src).expect("planned from census").clone();
        *student.params_mut().get_mut(dst).expect("planned from census") = value;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropSearchResult {
    pub options: PruneOptions,
    pub total_params: usize,
    /// Whether every student tensor has a same-shaped teacher counterpart.
    pub transferable: bool,
}

/// Evaluates every combination of pair-drop positions for the down and up
/// paths.
pub fn search_drop_positions(orig: &UNetSpec) -> Result<Vec<DropSearchResult>> {
    let mut out = Vec::new();
    for down_drop in DropPosition::ALL {
        for up_drop in DropPosition::ALL {
            let options = PruneOptions { down_drop, up_drop };
            let spec = student_spec_with(orig, options)?;
            let total_params = PhantomModel::new(&spec)?.total();
            let transferable = matches!(plan_transfer(orig, &spec), Ok(r) if r.unmatched.is_empty());
            out.push(DropSearchResult {
                options,
                total_params,
                transferable,
            });
        }
    }
    Ok(out)
}
