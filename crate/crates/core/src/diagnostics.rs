//! Embedding-geometry measurement and trajectory export: per-step norms,
//! norm ratios, and cosines of the learned concept against its initial
//! state and against the encoder's output on it.

use std::path::Path;

use crate::conditioning::encoder_outputs_at_slots;
use crate::embedding::{ConceptEmbedding, EmbeddingTable, EmbeddingVector};
use crate::encoder::TextEncoder;
use crate::error::{Error, Result};
use crate::prompt::PromptTemplate;

/// Scale and orientation of a vector relative to a reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    pub norm: f64,
    pub norm_ratio: f64,
    pub cosine: f64,
    /// Set when the measured vector is zero; cosine is reported as 0.
    pub zero_vector: bool,
}

/// Norm, norm ratio, and cosine of `v` against `reference`.
pub fn geometry(v: &EmbeddingVector, reference: &EmbeddingVector) -> Result<Geometry> {
    if v.dim() != reference.dim() {
        return Err(Error::DimensionMismatch {
            expected: reference.dim(),
            got: v.dim(),
        });
    }
    let ref_norm = reference.norm();
    if ref_norm == 0.0 {
        return Err(Error::ZeroReference);
    }
    let v_norm = v.norm();
    let (cosine, zero_vector) = if v_norm == 0.0 {
        (0.0, true)
    } else {
        (v.dot(reference) / (v_norm * ref_norm), false)
    };
    Ok(Geometry {
        norm: v_norm,
        norm_ratio: v_norm / ref_norm,
        cosine,
        zero_vector,
    })
}

fn flat_geometry(v: &[f64], reference: &[f64]) -> Result<Geometry> {
    geometry(
        &EmbeddingVector::new(v.to_vec())?,
        &EmbeddingVector::new(reference.to_vec())?,
    )
}

/// Geometry of one slot (or the slot concatenation) at one recorded step.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotGeometry {
    pub slot: String,
    pub norm: f64,
    pub norm_ratio_to_init: f64,
    pub cosine_to_init: f64,
    pub cosine_to_encoder_output: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub total_loss: f64,
    pub diffusion_loss: f64,
    pub reg_loss: f64,
    pub per_slot: Vec<SlotGeometry>,
    /// Same quantities over the concatenation of all slots.
    pub concat: SlotGeometry,
}

/// Per-step log of losses and geometry for diagnostics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryRecord {
    points: Vec<TrajectoryPoint>,
}

/// Loss values carried into [`record_step`].
#[derive(Debug, Clone, Copy)]
pub struct StepLosses {
    pub total: f64,
    pub diffusion: f64,
    pub reg: f64,
}

impl TrajectoryRecord {
    pub fn new() -> Self {
        TrajectoryRecord { points: Vec::new() }
    }

    /// Assemble a record from pre-computed points (replay tooling and
    /// tests). Steps must be strictly increasing.
    pub fn from_points(points: Vec<TrajectoryPoint>) -> Result<Self> {
        for w in points.windows(2) {
            if w[1].step <= w[0].step {
                return Err(Error::NonMonotonicStep {
                    step: w[1].step,
                    last: w[0].step,
                });
            }
        }
        Ok(TrajectoryRecord { points })
    }

    pub fn points(&self) -> &[TrajectoryPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn last_step(&self) -> Option<usize> {
        self.points.last().map(|p| p.step)
    }
}

/// Append one trajectory point: geometry of every slot against `v_init`
/// and against the current encoder output at the placeholder positions of
/// `template`.
#[allow(clippy::too_many_arguments)]
pub fn record_step(
    record: &mut TrajectoryRecord,
    step: usize,
    losses: StepLosses,
    concept: &ConceptEmbedding,
    v_init: &ConceptEmbedding,
    encoder: &dyn TextEncoder,
    template: &PromptTemplate,
    table: &dyn EmbeddingTable,
) -> Result<()> {
    if let Some(last) = record.last_step() {
        if step <= last {
            return Err(Error::NonMonotonicStep { step, last });
        }
    }
    let encoded = encoder_outputs_at_slots(template, concept, encoder, table)?;
    let mut per_slot = Vec::with_capacity(concept.k());
    for (i, (slot, v)) in concept.slots().enumerate() {
        let against_init = geometry(v, v_init.vector(i))?;
        let enc_cos = geometry(v, &encoded[i]).map(|g| g.cosine).unwrap_or(0.0);
        per_slot.push(SlotGeometry {
            slot: slot.to_string(),
            norm: against_init.norm,
            norm_ratio_to_init: against_init.norm_ratio,
            cosine_to_init: against_init.cosine,
            cosine_to_encoder_output: enc_cos,
        });
    }
    let concat_v = concept.concat();
    let concat_init = v_init.concat();
    let concat_enc: Vec<f64> = encoded
        .iter()
        .flat_map(|v| v.values().iter().copied())
        .collect();
    let g = flat_geometry(&concat_v, &concat_init)?;
    let enc_cos = flat_geometry(&concat_v, &concat_enc)
        .map(|g| g.cosine)
        .unwrap_or(0.0);
    let concat = SlotGeometry {
        slot: "concat".to_string(),
        norm: g.norm,
        norm_ratio_to_init: g.norm_ratio,
        cosine_to_init: g.cosine,
        cosine_to_encoder_output: enc_cos,
    };
    record.points.push(TrajectoryPoint {
        step,
        total_loss: losses.total,
        diffusion_loss: losses.diffusion,
        reg_loss: losses.reg,
        per_slot,
        concat,
    });
    Ok(())
}

fn format_row(step: usize, losses: (f64, f64, f64), s: &SlotGeometry) -> String {
    format!(
        "{},{:.12e},{:.12e},{:.12e},{},{:.12e},{:.12e},{:.12e},{:.12e}\n",
        step,
        losses.0,
        losses.1,
        losses.2,
        s.slot,
        s.norm,
        s.norm_ratio_to_init,
        s.cosine_to_init,
        s.cosine_to_encoder_output
    )
}

pub const TRAJECTORY_CSV_HEADER: &str =
    "step,total_loss,diffusion_loss,reg_loss,slot,norm,norm_ratio,cos_init,cos_enc";

/// Write one row per (step, slot) with the per-slot geometry columns.
pub fn export_trajectory(record: &TrajectoryRecord, path: &Path) -> Result<()> {
    if record.is_empty() {
        return Err(Error::EmptyInput("trajectory record".into()));
    }
    let mut out = String::from(TRAJECTORY_CSV_HEADER);
    out.push('\n');
    for p in &record.points {
        for s in &p.per_slot {
            out.push_str(&format_row(
                p.step,
                (p.total_loss, p.diffusion_loss, p.reg_loss),
                s,
            ));
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Companion export of the slot-concatenation geometry, one row per step.
pub fn export_trajectory_concat(record: &TrajectoryRecord, path: &Path) -> Result<()> {
    if record.is_empty() {
        return Err(Error::EmptyInput("trajectory record".into()));
    }
    let mut out = String::from(TRAJECTORY_CSV_HEADER);
    out.push('\n');
    for p in &record.points {
        out.push_str(&format_row(
            p.step,
            (p.total_loss, p.diffusion_loss, p.reg_loss),
            &p.concat,
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// One parsed trajectory CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryCsvRow {
    pub step: usize,
    pub total_loss: f64,
    pub diffusion_loss: f64,
    pub reg_loss: f64,
    pub slot: String,
    pub norm: f64,
    pub norm_ratio: f64,
    pub cos_init: f64,
    pub cos_enc: f64,
}

/// Parse a CSV produced by [`export_trajectory`] (or the concat variant).
pub fn parse_trajectory_csv(path: &Path) -> Result<Vec<TrajectoryCsvRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == TRAJECTORY_CSV_HEADER => {}
        other => {
            return Err(Error::CorruptFile {
                path: path.display().to_string(),
                reason: format!("unexpected header {other:?}"),
            })
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 9 {
            return Err(Error::CorruptFile {
                path: path.display().to_string(),
                reason: format!("row {} has {} cells", i + 2, cells.len()),
            });
        }
        let parse_f = |s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|e| Error::CorruptFile {
                path: path.display().to_string(),
                reason: format!("bad float {s:?}: {e}"),
            })
        };
        rows.push(TrajectoryCsvRow {
            step: cells[0].parse().map_err(|e| Error::CorruptFile {
                path: path.display().to_string(),
                reason: format!("bad step {:?}: {e}", cells[0]),
            })?,
            total_loss: parse_f(cells[1])?,
            diffusion_loss: parse_f(cells[2])?,
            reg_loss: parse_f(cells[3])?,
            slot: cells[4].to_string(),
            norm: parse_f(cells[5])?,
            norm_ratio: parse_f(cells[6])?,
            cos_init: parse_f(cells[7])?,
            cos_enc: parse_f(cells[8])?,
        });
    }
    Ok(rows)
}
