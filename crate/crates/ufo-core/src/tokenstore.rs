//! The persistent scene representation: token storage, visibility-based
//! filtering over a uniform voxel grid, and the replace/append merge that
//! advances the memory each frame.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::geometry::{frustum_aabb, in_frustum, CameraPose, Intrinsics};
use nalgebra::Vector3;
use thiserror::Error;

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"UFOS";
pub const SNAPSHOT_VERSION: u32 = 1;
pub const DEFAULT_VOXEL_SIZE: f64 = 4.0;
/// Default visible-token budget.
pub const DEFAULT_K_BUDGET: usize = 3600;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("contract error: {0}")]
    Contract(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
}

/// One unit of scene memory: a world position plus a feature vector,
/// stamped with the frame that created it.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneToken {
    pub id: u64,
    pub position: [f32; 3],
    pub feature: Vec<f32>,
    pub birth_time: f32,
    pub birth_frame: u32,
}

impl SceneToken {
    pub fn position_f64(&self) -> [f64; 3] {
        [
            self.position[0] as f64,
            self.position[1] as f64,
            self.position[2] as f64,
        ]
    }
}

type Cell = (i32, i32, i32);

/// Id-indexed token collection with a uniform voxel grid over positions.
/// Tokens are never deleted; refinement moves them in place.
pub struct SceneTokenStore {
    tokens: Vec<SceneToken>,
    by_id: HashMap<u64, usize>,
    grid: HashMap<Cell, Vec<u64>>,
    voxel_size: f64,
    next_id: u64,
    feature_dim: usize,
}

impl SceneTokenStore {
    pub fn new(feature_dim: usize) -> Self {
        Self::with_voxel_size(feature_dim, DEFAULT_VOXEL_SIZE)
    }

    pub fn with_voxel_size(feature_dim: usize, voxel_size: f64) -> Self {
        SceneTokenStore {
            tokens: Vec::new(),
            by_id: HashMap::new(),
            grid: HashMap::new(),
            voxel_size,
            next_id: 0,
            feature_dim,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    pub fn tokens(&self) -> &[SceneToken] {
        &self.tokens
    }

    pub fn get(&self, id: u64) -> Option<&SceneToken> {
        self.by_id.get(&id).map(|&i| &self.tokens[i])
    }

    /// Hand out `n` fresh ids for tokens about to be merged.
    pub fn reserve_ids(&mut self, n: usize) -> std::ops::Range<u64> {
        let start = self.next_id;
        self.next_id += n as u64;
        start..self.next_id
    }

    fn cell_of(&self, p: &[f32; 3]) -> Cell {
        (
            (p[0] as f64 / self.voxel_size).floor() as i32,
            (p[1] as f64 / self.voxel_size).floor() as i32,
            (p[2] as f64 / self.voxel_size).floor() as i32,
        )
    }

    fn grid_insert(&mut self, id: u64, p: &[f32; 3]) {
        let cell = self.cell_of(p);
        self.grid.entry(cell).or_default().push(id);
    }

    fn grid_remove(&mut self, id: u64, p: &[f32; 3]) {
        let cell = self.cell_of(p);
        if let Some(ids) = self.grid.get_mut(&cell) {
            if let Some(pos) = ids.iter().position(|&x| x == id) {
                ids.swap_remove(pos);
            }
            if ids.is_empty() {
                self.grid.remove(&cell);
            }
        }
    }

    /// Tokens inside any of the frame's camera frusta, nearest-first by
    /// distance to the front (index 0) camera center, truncated to
    /// `budget`. Ties break by ascending id. Only voxels overlapping the
    /// frustum AABBs are visited, so cost tracks candidates, not store size.
    pub fn select_visible(
        &self,
        poses: &[CameraPose],
        intrinsics: &[Intrinsics],
        budget: usize,
    ) -> Vec<SceneToken> {
        assert_eq!(poses.len(), intrinsics.len());
        if budget == 0 || poses.is_empty() || self.tokens.is_empty() {
            return Vec::new();
        }
        let front = poses[0].center();
        let mut candidates: Vec<(f64, u64)> = Vec::new();
        let mut seen_cells: std::collections::HashSet<Cell> = std::collections::HashSet::new();
        for (pose, k) in poses.iter().zip(intrinsics) {
            let (lo, hi) = frustum_aabb(pose, k);
            let c0 = (
                (lo[0] / self.voxel_size).floor() as i32,
                (lo[1] / self.voxel_size).floor() as i32,
                (lo[2] / self.voxel_size).floor() as i32,
            );
            let c1 = (
                (hi[0] / self.voxel_size).floor() as i32,
                (hi[1] / self.voxel_size).floor() as i32,
                (hi[2] / self.voxel_size).floor() as i32,
            );
            for cx in c0.0..=c1.0 {
                for cy in c0.1..=c1.1 {
                    for cz in c0.2..=c1.2 {
                        let cell = (cx, cy, cz);
                        if !seen_cells.insert(cell) {
                            continue;
                        }
                        let Some(ids) = self.grid.get(&cell) else { continue };
                        for &id in ids {
                            let tok = &self.tokens[self.by_id[&id]];
                            let p = tok.position_f64();
                            let pv = Vector3::new(p[0], p[1], p[2]);
                            let visible = poses
                                .iter()
                                .zip(intrinsics)
                                .any(|(pp, kk)| in_frustum(&pv, pp, kk));
                            if visible {
                                candidates.push(((pv - front).norm(), id));
                            }
                        }
                    }
                }
            }
        }
        // a token can enter via several cameras' cell ranges only once
        // (seen_cells dedupes cells), but sort stays the tie-break authority
        candidates.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        candidates.truncate(budget);
        candidates
            .into_iter()
            .map(|(_, id)| self.tokens[self.by_id[&id]].clone())
            .collect()
    }

    /// Brute-force reference for `select_visible`: filter all, sort all,
    /// take K. Kept alongside the production path as its oracle.
    pub fn select_visible_bruteforce(
        &self,
        poses: &[CameraPose],
        intrinsics: &[Intrinsics],
        budget: usize,
    ) -> Vec<SceneToken> {
        if budget == 0 || poses.is_empty() {
            return Vec::new();
        }
        let front = poses[0].center();
        let mut candidates: Vec<(f64, u64)> = self
            .tokens
            .iter()
            .filter(|t| {
                let p = t.position_f64();
                let pv = Vector3::new(p[0], p[1], p[2]);
                poses
                    .iter()
                    .zip(intrinsics)
                    .any(|(pp, kk)| in_frustum(&pv, pp, kk))
            })
            .map(|t| {
                let p = t.position_f64();
                ((Vector3::new(p[0], p[1], p[2]) - front).norm(), t.id)
            })
            .collect();
        candidates.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        candidates.truncate(budget);
        candidates
            .into_iter()
            .map(|(_, id)| self.tokens[self.by_id[&id]].clone())
            .collect()
    }

    /// Advance the memory one step: refined tokens overwrite in place (ids
    /// must be exactly the visible set), new tokens append, everything else
    /// stays untouched.
    pub fn merge(
        &mut self,
        visible_ids: &[u64],
        refined: Vec<SceneToken>,
        new_tokens: Vec<SceneToken>,
    ) -> Result<(), StoreError> {
        if refined.len() != visible_ids.len() {
            return Err(StoreError::Contract(format!(
                "refined count {} != visible count {}",
                refined.len(),
                visible_ids.len()
            )));
        }
        let mut visible: std::collections::HashSet<u64> = visible_ids.iter().copied().collect();
        for tok in &refined {
            if !visible.remove(&tok.id) {
                return Err(StoreError::Contract(format!(
                    "refined id {} not in visible set (or repeated)",
                    tok.id
                )));
            }
        }
        let mut fresh: std::collections::HashSet<u64> = std::collections::HashSet::new();
        for tok in &new_tokens {
            if self.by_id.contains_key(&tok.id) {
                return Err(StoreError::Contract(format!(
                    "new token id {} already present",
                    tok.id
                )));
            }
            if !fresh.insert(tok.id) {
                return Err(StoreError::Contract(format!(
                    "duplicate new token id {}",
                    tok.id
                )));
            }
        }
        for tok in refined {
            let idx = self.by_id[&tok.id];
            let old_pos = self.tokens[idx].position;
            if old_pos != tok.position {
                self.grid_remove(tok.id, &old_pos);
                self.grid_insert(tok.id, &tok.position);
            }
            self.tokens[idx] = tok;
        }
        for tok in new_tokens {
            let id = tok.id;
            let pos = tok.position;
            self.by_id.insert(id, self.tokens.len());
            self.tokens.push(tok);
            self.grid_insert(id, &pos);
            if id >= self.next_id {
                self.next_id = id + 1;
            }
        }
        Ok(())
    }

    // ── snapshot format ─────────────────────────────────────────────

    pub fn snapshot(&self, path: &Path) -> Result<(), StoreError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
        w.write_all(&(self.feature_dim as u32).to_le_bytes())?;
        w.write_all(&(self.tokens.len() as u32).to_le_bytes())?;
        for t in &self.tokens {
            w.write_all(&t.id.to_le_bytes())?;
            for &p in &t.position {
                w.write_all(&p.to_le_bytes())?;
            }
            w.write_all(&t.birth_time.to_le_bytes())?;
            w.write_all(&t.birth_frame.to_le_bytes())?;
            debug_assert_eq!(t.feature.len(), self.feature_dim);
            for &f in &t.feature {
                w.write_all(&f.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn restore(path: &Path) -> Result<Self, StoreError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(StoreError::Format(format!(
                "bad magic {magic:?}, expected UFOS"
            )));
        }
        let version = read_u32(&mut r, "version")?;
        if version != SNAPSHOT_VERSION {
            return Err(StoreError::Format(format!(
                "unsupported snapshot version {version}"
            )));
        }
        let d = read_u32(&mut r, "feature dim")? as usize;
        let count = read_u32(&mut r, "token count")? as usize;
        let mut store = SceneTokenStore::new(d);
        for i in 0..count {
            let mut idb = [0u8; 8];
            read_exact(&mut r, &mut idb, "token id")?;
            let id = u64::from_le_bytes(idb);
            let mut position = [0f32; 3];
            for p in position.iter_mut() {
                *p = read_f32(&mut r, "position")?;
            }
            let birth_time = read_f32(&mut r, "birth time")?;
            let birth_frame = read_u32(&mut r, "birth frame")?;
            let mut feature = Vec::with_capacity(d);
            for _ in 0..d {
                feature.push(read_f32(&mut r, "feature")?);
            }
            if store.by_id.contains_key(&id) {
                return Err(StoreError::Format(format!(
                    "duplicate token id {id} at record {i}"
                )));
            }
            store.by_id.insert(id, store.tokens.len());
            store.grid_insert(id, &position);
            store.tokens.push(SceneToken {
                id,
                position,
                feature,
                birth_time,
                birth_frame,
            });
            if id >= store.next_id {
                store.next_id = id + 1;
            }
        }
        Ok(store)
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<(), StoreError> {
    r.read_exact(buf)
        .map_err(|_| StoreError::Format(format!("truncated snapshot while reading {what}")))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32, StoreError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32(r: &mut impl Read, what: &str) -> Result<f32, StoreError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(f32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tok(id: u64, pos: [f32; 3], d: usize) -> SceneToken {
        SceneToken {
            id,
            position: pos,
            feature: vec![id as f32; d],
            birth_time: 0.0,
            birth_frame: 0,
        }
    }

    fn looking_forward() -> (Vec<CameraPose>, Vec<Intrinsics>) {
        (
            vec![CameraPose::identity(0.0)],
            vec![Intrinsics::from_fov(64, 48, 1.2)],
        )
    }

    #[test]
    fn empty_store_selects_nothing() {
        let store = SceneTokenStore::new(4);
        let (poses, ks) = looking_forward();
        assert!(store.select_visible(&poses, &ks, 10).is_empty());
    }

    #[test]
    fn selects_nearest_k_by_center_distance() {
        let mut store = SceneTokenStore::new(2);
        let news: Vec<SceneToken> = (0..5)
            .map(|i| tok(i, [0.0, 0.0, 2.0 + i as f32], 2))
            .collect();
        store.reserve_ids(5);
        store.merge(&[], vec![], news).unwrap();
        let (poses, ks) = looking_forward();
        let sel = store.select_visible(&poses, &ks, 3);
        assert_eq!(sel.iter().map(|t| t.id).collect::<Vec<_>>(), vec![0, 1, 2]);
        let brute = store.select_visible_bruteforce(&poses, &ks, 3);
        assert_eq!(
            sel.iter().map(|t| t.id).collect::<Vec<_>>(),
            brute.iter().map(|t| t.id).collect::<Vec<_>>()
        );
    }

    #[test]
    fn merge_counts_and_untouched_bytes() {
        let mut store = SceneTokenStore::new(3);
        let initial: Vec<SceneToken> = (0..10).map(|i| tok(i, [i as f32, 0.0, 5.0], 3)).collect();
        store.reserve_ids(10);
        store.merge(&[], vec![], initial.clone()).unwrap();
        // refine 4, add 3
        let visible = [1u64, 3, 5, 7];
        let refined: Vec<SceneToken> = visible
            .iter()
            .map(|&i| {
                let mut t = tok(i, [i as f32, 1.0, 5.0], 3);
                t.feature = vec![99.0; 3];
                t
            })
            .collect();
        let ids = store.reserve_ids(3);
        let news: Vec<SceneToken> = ids.map(|i| tok(i, [0.0, 0.0, 9.0], 3)).collect();
        store.merge(&visible, refined, news).unwrap();
        assert_eq!(store.len(), 13);
        for t in &initial {
            if !visible.contains(&t.id) {
                assert_eq!(store.get(t.id).unwrap(), t);
            }
        }
        // empty merge leaves the store unchanged
        let before: Vec<SceneToken> = store.tokens().to_vec();
        store.merge(&[], vec![], vec![]).unwrap();
        assert_eq!(store.tokens(), before.as_slice());
    }

    #[test]
    fn merge_contract_violations() {
        let mut store = SceneTokenStore::new(1);
        store.reserve_ids(2);
        store
            .merge(&[], vec![], vec![tok(0, [0.0; 3], 1), tok(1, [0.0; 3], 1)])
            .unwrap();
        // refined id not in visible set
        assert!(store.merge(&[0], vec![tok(1, [0.0; 3], 1)], vec![]).is_err());
        // duplicate new ids
        let e = store.merge(
            &[],
            vec![],
            vec![tok(7, [0.0; 3], 1), tok(7, [0.0; 3], 1)],
        );
        assert!(matches!(e, Err(StoreError::Contract(_))));
        // new id already present
        assert!(store.merge(&[], vec![], vec![tok(0, [0.0; 3], 1)]).is_err());
    }

    #[test]
    fn random_updates_match_set_algebra_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let mut store = SceneTokenStore::new(2);
        let mut oracle: std::collections::BTreeSet<u64> = Default::default();
        let mut expected_count = 0usize;
        for _ in 0..100 {
            let (poses, ks) = looking_forward();
            let visible = store.select_visible(&poses, &ks, rng.gen_range(0..8));
            let visible_ids: Vec<u64> = visible.iter().map(|t| t.id).collect();
            let refined: Vec<SceneToken> = visible
                .iter()
                .map(|t| {
                    let mut t = t.clone();
                    t.position[0] += rng.gen_range(-0.5..0.5);
                    t
                })
                .collect();
            let n_new = rng.gen_range(0..5);
            let ids = store.reserve_ids(n_new);
            let news: Vec<SceneToken> = ids
                .map(|i| {
                    tok(
                        i,
                        [
                            rng.gen_range(-10.0..10.0),
                            rng.gen_range(-5.0..5.0),
                            rng.gen_range(1.0..50.0),
                        ],
                        2,
                    )
                })
                .collect();
            for t in &news {
                oracle.insert(t.id);
            }
            expected_count += n_new;
            store.merge(&visible_ids, refined, news).unwrap();
            assert_eq!(store.len(), expected_count, "count recurrence violated");
            let got: std::collections::BTreeSet<u64> =
                store.tokens().iter().map(|t| t.id).collect();
            assert_eq!(got, oracle);
        }
    }

    #[test]
    fn snapshot_round_trip_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = SceneTokenStore::new(8);
        let ids = store.reserve_ids(1000);
        let news: Vec<SceneToken> = ids
            .map(|i| SceneToken {
                id: i,
                position: [rng.gen::<f32>() * 100.0, rng.gen(), rng.gen()],
                feature: (0..8).map(|_| rng.gen::<f32>()).collect(),
                birth_time: rng.gen(),
                birth_frame: rng.gen_range(0..100),
            })
            .collect();
        store.merge(&[], vec![], news).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.ufos");
        store.snapshot(&path).unwrap();
        let back = SceneTokenStore::restore(&path).unwrap();
        assert_eq!(back.len(), store.len());
        assert_eq!(back.next_id(), store.next_id());
        for (a, b) in store.tokens().iter().zip(back.tokens()) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.birth_frame, b.birth_frame);
            assert_eq!(a.birth_time.to_bits(), b.birth_time.to_bits());
            for i in 0..3 {
                assert_eq!(a.position[i].to_bits(), b.position[i].to_bits());
            }
            for (x, y) in a.feature.iter().zip(&b.feature) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn empty_store_round_trips() {
        let store = SceneTokenStore::new(16);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.ufos");
        store.snapshot(&path).unwrap();
        let back = SceneTokenStore::restore(&path).unwrap();
        assert_eq!(back.len(), 0);
        assert_eq!(back.feature_dim(), 16);
    }

    #[test]
    fn truncated_snapshot_is_format_error() {
        let mut store = SceneTokenStore::new(4);
        store.reserve_ids(3);
        store
            .merge(
                &[],
                vec![],
                (0..3).map(|i| tok(i, [0.0; 3], 4)).collect(),
            )
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.ufos");
        store.snapshot(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(
            SceneTokenStore::restore(&path),
            Err(StoreError::Format(_))
        ));
    }

    #[test]
    fn filtering_matches_bruteforce_on_random_configs() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..50 {
            let mut store = SceneTokenStore::new(1);
            let n = rng.gen_range(0..300);
            let ids = store.reserve_ids(n);
            let news: Vec<SceneToken> = ids
                .map(|i| {
                    tok(
                        i,
                        [
                            rng.gen_range(-60.0..60.0),
                            rng.gen_range(-20.0..20.0),
                            rng.gen_range(-60.0..60.0),
                        ],
                        1,
                    )
                })
                .collect();
            store.merge(&[], vec![], news).unwrap();
            let yaw: f64 = rng.gen_range(-3.1..3.1);
            let rot = nalgebra::Rotation3::from_axis_angle(&nalgebra::Vector3::y_axis(), yaw)
                .into_inner();
            let pose = CameraPose::new(
                crate::geometry::RigidTransform::from_parts(
                    &rot,
                    &nalgebra::Vector3::new(
                        rng.gen_range(-10.0..10.0),
                        rng.gen_range(-3.0..3.0),
                        rng.gen_range(-10.0..10.0),
                    ),
                )
                .matrix,
                0.0,
            );
            let k = Intrinsics::from_fov(64, 48, 1.3);
            let budget = rng.gen_range(0..40);
            let a = store.select_visible(&[pose.clone()], &[k], budget);
            let b = store.select_visible_bruteforce(&[pose], &[k], budget);
            assert_eq!(
                a.iter().map(|t| t.id).collect::<Vec<_>>(),
                b.iter().map(|t| t.id).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn far_tokens_do_not_slow_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut store = SceneTokenStore::new(1);
        let ids = store.reserve_ids(2000);
        let news: Vec<SceneToken> = ids
            .map(|i| {
                tok(
                    i,
                    [
                        rng.gen_range(-30.0..30.0),
                        rng.gen_range(-10.0..10.0),
                        rng.gen_range(1.0..100.0),
                    ],
                    1,
                )
            })
            .collect();
        store.merge(&[], vec![], news).unwrap();
        let (poses, ks) = looking_forward();
        let baseline = store.select_visible(&poses, &ks, 256);

        let warm = |s: &SceneTokenStore| {
            let t0 = std::time::Instant::now();
            for _ in 0..20 {
                std::hint::black_box(s.select_visible(&poses, &ks, 256));
            }
            t0.elapsed().as_secs_f64()
        };
        let _ = warm(&store);
        let t_before = warm(&store).min(warm(&store));

        // double N with tokens far outside every frustum
        let ids = store.reserve_ids(2000);
        let far: Vec<SceneToken> = ids
            .map(|i| tok(i, [5000.0 + i as f32, 900.0, -4000.0], 1))
            .collect();
        store.merge(&[], vec![], far).unwrap();
        let after_sel = store.select_visible(&poses, &ks, 256);
        assert_eq!(
            baseline.iter().map(|t| t.id).collect::<Vec<_>>(),
            after_sel.iter().map(|t| t.id).collect::<Vec<_>>()
        );
        let t_after = warm(&store).min(warm(&store));
        assert!(
            t_after < t_before * 1.25,
            "query slowed {:.1}% by far tokens",
            (t_after / t_before - 1.0) * 100.0
        );
    }
}
