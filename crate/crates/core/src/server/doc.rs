use std::collections::VecDeque;

use axum::http::StatusCode;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::ApiError;
use crate::error::Result;
use crate::voxgrid::{linear_index, CoarseInput, LabelGrid, OccupancyGrid};

const B64: base64::engine::GeneralPurpose = base64::engine::general_purpose::STANDARD;

/// Wire form of the coarse document. `occ` is a base64 bitset, bit `i` at
/// byte `i / 8`, position `i % 8` (least significant first), x-fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DocJson {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub revision: Option<u64>,
    pub side: usize,
    pub occ: String,
    pub part: Vec<u16>,
    pub style: Vec<u16>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditOp {
    /// Fill voxels with style `value`.
    Add,
    Remove,
    PaintStyle,
    PaintPart,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditBatch {
    pub op: EditOp,
    pub coords: Vec<[i64; 3]>,
    #[serde(default)]
    pub value: Option<u16>,
}

/// A batch of edits applied atomically on top of `revision`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditRequest {
    #[serde(default)]
    pub revision: Option<u64>,
    pub edits: Vec<EditBatch>,
}

/// The editable document plus its undo history.
#[derive(Debug, Clone)]
pub struct Session {
    doc: CoarseInput,
    revision: u64,
    n_styles: usize,
    n_parts: usize,
    undo: VecDeque<CoarseInput>,
    redo: Vec<CoarseInput>,
    limit: usize,
}

fn conflict(current: u64, got: u64) -> ApiError {
    ApiError::new(StatusCode::CONFLICT, format!("revision {got} is stale; document is at {current}"))
}

fn unprocessable(m: impl Into<String>) -> ApiError {
    ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, m)
}

pub fn encode_bits(occ: &OccupancyGrid) -> String {
    let mut bytes = vec![0u8; occ.len().div_ceil(8)];
    for (i, &v) in occ.values().iter().enumerate() {
        if v > 0.0 {
            bytes[i / 8] |= 1 << (i % 8);
        }
    }
    B64.encode(bytes)
}

impl Session {
    pub fn new(k: u32, n_styles: usize, n_parts: usize, limit: usize) -> Result<Self> {
        Ok(Self {
            doc: CoarseInput::empty(k)?,
            revision: 0,
            n_styles,
            n_parts,
            undo: VecDeque::new(),
            redo: Vec::new(),
            limit,
        })
    }

    pub fn doc(&self) -> &CoarseInput {
        &self.doc
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn undo_depth(&self) -> usize {
        self.undo.len()
    }

    fn check_revision(&self, r: Option<u64>) -> Result<(), ApiError> {
        match r {
            Some(r) if r != self.revision => Err(conflict(self.revision, r)),
            _ => Ok(()),
        }
    }

    fn commit(&mut self, next: CoarseInput) -> u64 {
        let prev = std::mem::replace(&mut self.doc, next);
        if self.undo.len() == self.limit {
            self.undo.pop_front();
        }
        self.undo.push_back(prev);
        self.redo.clear();
        self.revision += 1;
        self.revision
    }

    pub fn doc_json(&self) -> DocJson {
        DocJson {
            revision: Some(self.revision),
            side: self.doc.side(),
            occ: encode_bits(self.doc.occ()),
            part: self.doc.labels().part().to_vec(),
            style: self.doc.labels().style().to_vec(),
        }
    }

    /// Decodes a wire document, checking it against the model's layout.
    pub fn decode(&self, d: &DocJson) -> Result<CoarseInput, ApiError> {
        let side = self.doc.side();
        if d.side != side {
            return Err(ApiError::bad_request(format!("side {} but the model expects {side}", d.side)));
        }
        let n = side * side * side;
        let bytes = B64.decode(&d.occ).map_err(|e| ApiError::bad_request(format!("occ: {e}")))?;
        if bytes.len() != n.div_ceil(8) || d.part.len() != n || d.style.len() != n {
            return Err(ApiError::bad_request("array lengths do not match the side"));
        }
        let values: Vec<f32> = (0..n).map(|i| ((bytes[i / 8] >> (i % 8)) & 1) as f32).collect();
        for (i, &s) in d.style.iter().enumerate() {
            if values[i] > 0.0 && (s == 0 || s as usize > self.n_styles) {
                return Err(unprocessable(format!("voxel {i}: unknown style {s}")));
            }
            if values[i] > 0.0 && d.part[i] as usize > self.n_parts {
                return Err(unprocessable(format!("voxel {i}: unknown part {}", d.part[i])));
            }
        }
        let log2 = self.doc.log2();
        let occ = OccupancyGrid::from_values(log2, values)?;
        let labels = LabelGrid::from_parts(log2, d.part.clone(), d.style.clone())?;
        Ok(CoarseInput::new(occ, labels)?)
    }

    pub fn replace(&mut self, d: &DocJson) -> Result<u64, ApiError> {
        self.check_revision(d.revision)?;
        let next = self.decode(d)?;
        Ok(self.commit(next))
    }

    /// Applies every batch or none of them.
    pub fn apply(&mut self, req: &EditRequest) -> Result<u64, ApiError> {
        self.check_revision(req.revision)?;
        let side = self.doc.side() as i64;
        let (occ, labels) = self.doc.clone().into_parts();
        let mut values = occ.into_values();
        let (mut part, mut style) = labels.into_parts();
        for batch in &req.edits {
            let value = match (batch.op, batch.value) {
                (EditOp::Remove, _) => 0,
                (_, Some(v)) => v,
                (op, None) => return Err(ApiError::bad_request(format!("{op:?} needs a value"))),
            };
            match batch.op {
                EditOp::Add | EditOp::PaintStyle if value == 0 || value as usize > self.n_styles => {
                    return Err(unprocessable(format!("unknown style {value}")));
                }
                EditOp::PaintPart if value as usize > self.n_parts => {
                    return Err(unprocessable(format!("unknown part {value}")));
                }
                _ => {}
            }
            for &[x, y, z] in &batch.coords {
                if [x, y, z].iter().any(|&c| c < 0 || c >= side) {
                    return Err(ApiError::bad_request(format!("coordinate ({x}, {y}, {z}) outside the grid")));
                }
                let i = linear_index(side as usize, x as usize, y as usize, z as usize);
                match batch.op {
                    EditOp::Add => {
                        if values[i] == 0.0 {
                            part[i] = 0;
                        }
                        values[i] = 1.0;
                        style[i] = value;
                    }
                    EditOp::Remove => {
                        values[i] = 0.0;
                        part[i] = 0;
                        style[i] = 0;
                    }
                    EditOp::PaintStyle | EditOp::PaintPart if values[i] == 0.0 => {
                        return Err(unprocessable(format!("voxel ({x}, {y}, {z}) is empty")));
                    }
                    EditOp::PaintStyle => style[i] = value,
                    EditOp::PaintPart => part[i] = value,
                }
            }
        }
        let log2 = self.doc.log2();
        let next = CoarseInput::new(
            OccupancyGrid::from_values(log2, values)?,
            LabelGrid::from_parts(log2, part, style)?,
        )?;
        Ok(self.commit(next))
    }

    pub fn undo(&mut self, r: Option<u64>) -> Result<u64, ApiError> {
        self.check_revision(r)?;
        let prev = self.undo.pop_back().ok_or_else(|| ApiError::new(StatusCode::CONFLICT, "nothing to undo"))?;
        self.redo.push(std::mem::replace(&mut self.doc, prev));
        self.revision += 1;
        Ok(self.revision)
    }

    pub fn redo(&mut self, r: Option<u64>) -> Result<u64, ApiError> {
        self.check_revision(r)?;
        let next = self.redo.pop().ok_or_else(|| ApiError::new(StatusCode::CONFLICT, "nothing to redo"))?;
        self.undo.push_back(std::mem::replace(&mut self.doc, next));
        self.revision += 1;
        Ok(self.revision)
    }
}
