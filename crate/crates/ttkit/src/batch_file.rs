//! Packed-batch file container.
//!
//! Binary layout (all integers little-endian), sections in fixed order:
//!
//! ```text
//! header       magic "TTK1", version u32 (=1), T u64, segment_count u64,
//!              mode u8 (0 = PathSum, 1 = PathMean)
//! token_ids    u32[T]
//! origins      u8[T]            0 = Prompt, 1 = Generated
//! position_ids u32[T]
//! loss_weights f64[T]
//! logprobs     presence bitmap ceil(T/8) bytes (bit i = token i present,
//!              LSB first), then f64 values for present tokens in index order
//! segments     segment_count records of
//!              {u64 segment_id, i64 parent_or_minus1, u64 flat_start,
//!               u64 flat_end, u64 path_position_start}
//! turn table   u64 trajectory_count, then per trajectory:
//!              {u64 end_segment_id, u64 turn_count, turn_count records of
//!               {u64 turn_index, u64 segment_id, u64 local_start,
//!                u64 local_end, u8 role (0 Assistant, 1 Tool, 2 User)}}
//! ```
//!
//! A lossless JSON mirror of the same data ships for debugging; the binary
//! form is canonical and byte-deterministic for a given batch.

use crate::packing::{NormalizationMode, PackedBatch, PackedTurn, SegmentEntry, TrajectoryEntry};
use crate::trajectory::{Origin, Role};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"TTK1";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BatchFileError {
    #[error("bad magic: expected TTK1")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated file: needed {needed} more bytes for {section}")]
    Truncated { section: &'static str, needed: usize },
    #[error("invalid field: {0}")]
    InvalidField(String),
    #[error("json mirror: {0}")]
    Json(#[from] serde_json::Error),
}

fn origin_byte(o: Origin) -> u8 {
    match o {
        Origin::Prompt => 0,
        Origin::Generated => 1,
    }
}

fn role_byte(r: Role) -> u8 {
    match r {
        Role::Assistant => 0,
        Role::Tool => 1,
        Role::User => 2,
    }
}

/// Serialize a batch into the TTK1 byte layout.
pub fn to_bytes(batch: &PackedBatch) -> Vec<u8> {
    let t = batch.len();
    let mut out = Vec::with_capacity(64 + t * 21);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t as u64).to_le_bytes());
    out.extend_from_slice(&(batch.segments.len() as u64).to_le_bytes());
    out.push(match batch.mode {
        NormalizationMode::PathSum => 0,
        NormalizationMode::PathMean => 1,
    });

    for &id in &batch.token_ids {
        out.extend_from_slice(&id.to_le_bytes());
    }
    for &o in &batch.origins {
        out.push(origin_byte(o));
    }
    for &p in &batch.position_ids {
        out.extend_from_slice(&p.to_le_bytes());
    }
    for &w in &batch.loss_weights {
        out.extend_from_slice(&w.to_le_bytes());
    }

    let mut bitmap = vec![0u8; t.div_ceil(8)];
    for (i, lp) in batch.rollout_logprobs.iter().enumerate() {
        if lp.is_some() {
            bitmap[i / 8] |= 1 << (i % 8);
        }
    }
    out.extend_from_slice(&bitmap);
    for lp in batch.rollout_logprobs.iter().flatten() {
        out.extend_from_slice(&lp.to_le_bytes());
    }

    for seg in &batch.segments {
        out.extend_from_slice(&seg.segment_id.to_le_bytes());
        let parent: i64 = seg.parent_segment_id.map(|p| p as i64).unwrap_or(-1);
        out.extend_from_slice(&parent.to_le_bytes());
        out.extend_from_slice(&(seg.flat_start as u64).to_le_bytes());
        out.extend_from_slice(&(seg.flat_end as u64).to_le_bytes());
        out.extend_from_slice(&seg.path_position_start.to_le_bytes());
    }

    out.extend_from_slice(&(batch.trajectories.len() as u64).to_le_bytes());
    for traj in &batch.trajectories {
        out.extend_from_slice(&traj.end_segment_id.to_le_bytes());
        out.extend_from_slice(&(traj.turns.len() as u64).to_le_bytes());
        for turn in &traj.turns {
            out.extend_from_slice(&turn.turn_index.to_le_bytes());
            out.extend_from_slice(&turn.segment_id.to_le_bytes());
            out.extend_from_slice(&(turn.local_start as u64).to_le_bytes());
            out.extend_from_slice(&(turn.local_end as u64).to_le_bytes());
            out.push(role_byte(turn.role));
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, section: &'static str) -> Result<&'a [u8], BatchFileError> {
        if self.pos + n > self.bytes.len() {
            return Err(BatchFileError::Truncated {
                section,
                needed: self.pos + n - self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, section: &'static str) -> Result<u8, BatchFileError> {
        Ok(self.take(1, section)?[0])
    }

    fn u32(&mut self, section: &'static str) -> Result<u32, BatchFileError> {
        Ok(u32::from_le_bytes(self.take(4, section)?.try_into().unwrap()))
    }

    fn u64(&mut self, section: &'static str) -> Result<u64, BatchFileError> {
        Ok(u64::from_le_bytes(self.take(8, section)?.try_into().unwrap()))
    }

    fn i64(&mut self, section: &'static str) -> Result<i64, BatchFileError> {
        Ok(i64::from_le_bytes(self.take(8, section)?.try_into().unwrap()))
    }

    fn f64(&mut self, section: &'static str) -> Result<f64, BatchFileError> {
        Ok(f64::from_le_bytes(self.take(8, section)?.try_into().unwrap()))
    }
}

/// Deserialize a TTK1 byte stream back into a batch.
pub fn from_bytes(bytes: &[u8]) -> Result<PackedBatch, BatchFileError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(BatchFileError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(BatchFileError::UnsupportedVersion(version));
    }
    let t = r.u64("T")? as usize;
    let segment_count = r.u64("segment_count")? as usize;
    let mode = match r.u8("mode")? {
        0 => NormalizationMode::PathSum,
        1 => NormalizationMode::PathMean,
        m => return Err(BatchFileError::InvalidField(format!("mode byte {m}"))),
    };

    let mut token_ids = Vec::with_capacity(t);
    for _ in 0..t {
        token_ids.push(r.u32("token_ids")?);
    }
    let mut origins = Vec::with_capacity(t);
    for _ in 0..t {
        origins.push(match r.u8("origins")? {
            0 => Origin::Prompt,
            1 => Origin::Generated,
            b => return Err(BatchFileError::InvalidField(format!("origin byte {b}"))),
        });
    }
    let mut position_ids = Vec::with_capacity(t);
    for _ in 0..t {
        position_ids.push(r.u32("position_ids")?);
    }
    let mut loss_weights = Vec::with_capacity(t);
    for _ in 0..t {
        loss_weights.push(r.f64("loss_weights")?);
    }

    let bitmap = r.take(t.div_ceil(8), "logprob bitmap")?.to_vec();
    let mut rollout_logprobs = vec![None; t];
    for i in 0..t {
        if bitmap[i / 8] & (1 << (i % 8)) != 0 {
            rollout_logprobs[i] = Some(r.f64("logprob values")?);
        }
    }

    let mut segments = Vec::with_capacity(segment_count);
    for _ in 0..segment_count {
        let segment_id = r.u64("segments")?;
        let parent = r.i64("segments")?;
        let flat_start = r.u64("segments")? as usize;
        let flat_end = r.u64("segments")? as usize;
        let path_position_start = r.u64("segments")?;
        if parent < -1 {
            return Err(BatchFileError::InvalidField(format!("parent {parent}")));
        }
        segments.push(SegmentEntry {
            segment_id,
            parent_segment_id: (parent >= 0).then_some(parent as u64),
            flat_start,
            flat_end,
            path_position_start,
        });
    }

    let traj_count = r.u64("turn table")? as usize;
    let mut trajectories = Vec::with_capacity(traj_count);
    for _ in 0..traj_count {
        let end_segment_id = r.u64("turn table")?;
        let turn_count = r.u64("turn table")? as usize;
        let mut turns = Vec::with_capacity(turn_count);
        for _ in 0..turn_count {
            let turn_index = r.u64("turn table")?;
            let segment_id = r.u64("turn table")?;
            let local_start = r.u64("turn table")? as usize;
            let local_end = r.u64("turn table")? as usize;
            let role = match r.u8("turn table")? {
                0 => Role::Assistant,
                1 => Role::Tool,
                2 => Role::User,
                b => return Err(BatchFileError::InvalidField(format!("role byte {b}"))),
            };
            turns.push(PackedTurn { turn_index, segment_id, local_start, local_end, role });
        }
        trajectories.push(TrajectoryEntry { end_segment_id, turns });
    }
    if r.pos != bytes.len() {
        return Err(BatchFileError::InvalidField(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }

    Ok(PackedBatch {
        mode,
        token_ids,
        origins,
        position_ids,
        loss_weights,
        rollout_logprobs,
        segments,
        trajectories,
    })
}

/// Lossless JSON mirror of the batch, for debugging and diffing.
pub fn to_json(batch: &PackedBatch) -> Result<String, BatchFileError> {
    Ok(serde_json::to_string_pretty(batch)?)
}

pub fn from_json(json: &str) -> Result<PackedBatch, BatchFileError> {
    Ok(serde_json::from_str(json)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::packing::dfs_flatten;
    use crate::trajectory::{build_tree, LinearCall, TokenEvent, TurnSpan};

    fn sample_batch() -> PackedBatch {
        let mk = |cid: &str, ids: &[u32]| {
            let mut tokens = vec![TokenEvent::prompt(0)];
            tokens.extend(ids.iter().map(|&i| TokenEvent::generated(i, -0.25 * i as f64)));
            let turns = vec![TurnSpan::new(1, tokens.len(), Role::Assistant)];
            LinearCall::new(cid, 64, tokens, turns).unwrap()
        };
        let tree = build_tree(&[mk("a", &[1, 2, 3]), mk("b", &[1, 2, 3, 4])]).unwrap();
        dfs_flatten(&tree, NormalizationMode::PathMean).unwrap()
    }

    #[test]
    fn binary_roundtrip_is_exact() {
        let batch = sample_batch();
        let bytes = to_bytes(&batch);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(batch, back);
        // And byte-deterministic.
        assert_eq!(bytes, to_bytes(&back));
    }

    #[test]
    fn json_mirror_is_lossless() {
        let batch = sample_batch();
        let json = to_json(&batch).unwrap();
        let back = from_json(&json).unwrap();
        assert_eq!(batch, back);
    }

    #[test]
    fn header_fields_checked() {
        let batch = sample_batch();
        let mut bytes = to_bytes(&batch);
        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes), Err(BatchFileError::BadMagic)));

        let mut bytes = to_bytes(&batch);
        bytes[4] = 99;
        assert!(matches!(from_bytes(&bytes), Err(BatchFileError::UnsupportedVersion(_))));

        let bytes = to_bytes(&batch);
        assert!(matches!(
            from_bytes(&bytes[..bytes.len() - 3]),
            Err(BatchFileError::Truncated { .. })
        ));
    }

    #[test]
    fn prompt_tokens_have_no_logprob_bit() {
        let batch = sample_batch();
        let bytes = to_bytes(&batch);
        let back = from_bytes(&bytes).unwrap();
        for (o, lp) in back.origins.iter().zip(&back.rollout_logprobs) {
            assert_eq!(*o == Origin::Generated, lp.is_some());
        }
    }
}
