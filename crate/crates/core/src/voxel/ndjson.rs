//! Newline-delimited JSON voxel dumps: `{"level":i,"coord":[ix,iy,iz],"value":v}`.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{ActiveSet, ExistencePyramid, ScoredVoxels, VoxelCoord};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoxelRecord {
    pub level: usize,
    pub coord: [i32; 3],
    pub value: f64,
}

pub fn occupancy_records(set: &ActiveSet) -> impl Iterator<Item = VoxelRecord> + '_ {
    set.iter().map(|c| VoxelRecord {
        level: set.level(),
        coord: c.to_array(),
        value: 1.0,
    })
}

pub fn pyramid_records(p: &ExistencePyramid) -> impl Iterator<Item = VoxelRecord> + '_ {
    p.levels.iter().flat_map(occupancy_records)
}

pub fn score_records(s: &ScoredVoxels) -> impl Iterator<Item = VoxelRecord> + '_ {
    s.coords.iter().zip(&s.scores).map(|(c, &v)| VoxelRecord {
        level: s.level,
        coord: c.to_array(),
        value: v,
    })
}

pub fn write<W: Write>(mut w: W, records: impl IntoIterator<Item = VoxelRecord>) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, &r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read<R: BufRead>(r: R) -> Result<Vec<VoxelRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<ndjson>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Invalid(format!("ndjson line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Collects the records of one level into an occupancy set.
pub fn records_to_set(records: &[VoxelRecord], level: usize) -> ActiveSet {
    ActiveSet::from_iter_dedup(
        level,
        records.iter().filter(|r| r.level == level).map(|r| VoxelCoord::from_array(r.coord)),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_format() {
        let set = ActiveSet::new(2, vec![VoxelCoord::new(1, -2, 3)]).unwrap();
        let mut buf = Vec::new();
        write(&mut buf, occupancy_records(&set)).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "{\"level\":2,\"coord\":[1,-2,3],\"value\":1.0}\n");
        let back = read(buf.as_slice()).unwrap();
        assert_eq!(records_to_set(&back, 2), set);
    }
}
