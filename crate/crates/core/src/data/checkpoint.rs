//! Versioned, checksummed model checkpoints.
//!
//! Layout: magic `HEMFCKPT`, u32 schema version, u32 section count, then
//! sections of `[4-byte tag][u64 length][payload]`, then a CRC-32 of everything
//! before it. Numbers are little-endian, floats are raw IEEE-754 bits and
//! matrices are row-major. Unknown section tags are skipped. Files are written
//! to a temporary sibling and renamed into place.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::parse::IdMap;
use crate::error::{HemfError, Result};
use crate::math::SymmetricPd;
use crate::model::{
    CommunityPosterior, CommunityStats, CommunityUpdate, FactorPosterior, Hyperparameters, MembershipPosterior,
    ModelState, SideState, StickPosterior,
};
use crate::online::{GlobalUpdate, OnlineConfig, OnlineSession};
use crate::ratings::{Rating, SparseRatings};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"HEMFCKPT";

/// Streaming bookkeeping carried alongside the model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StreamProgress {
    pub chunks_processed: u64,
    pub pending_new: Vec<(usize, usize)>,
    pub observed_at_last_pass: usize,
    pub config: Option<OnlineConfig>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: ModelState,
    pub observed: SparseRatings,
    pub progress: StreamProgress,
    pub users: IdMap,
    pub items: IdMap,
}

impl Checkpoint {
    pub fn from_state(state: ModelState, users: IdMap, items: IdMap) -> Self {
        let observed = SparseRatings::empty(state.users.n_entities(), state.items.n_entities());
        Checkpoint { state, observed, progress: StreamProgress::default(), users, items }
    }

    pub fn from_session(session: &OnlineSession, users: IdMap, items: IdMap) -> Self {
        Checkpoint {
            state: session.state.clone(),
            observed: session.observed.clone(),
            progress: StreamProgress {
                chunks_processed: session.chunks_processed,
                pending_new: session.pending_new.clone(),
                observed_at_last_pass: session.observed_at_last_pass,
                config: Some(session.config.clone()),
            },
            users,
            items,
        }
    }

    /// Rebuilds the streaming session; `config` overrides the stored one.
    pub fn into_session(self, config: Option<OnlineConfig>) -> (OnlineSession, IdMap, IdMap) {
        let config = config.or(self.progress.config).unwrap_or_default();
        let mut session = OnlineSession::from_state(self.state, self.observed, config);
        session.chunks_processed = self.progress.chunks_processed;
        session.pending_new = self.progress.pending_new;
        session.observed_at_last_pass = self.progress.observed_at_last_pass;
        (session, self.users, self.items)
    }
}

struct Encoder(Vec<u8>);

impl Encoder {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.usize(v.len());
        for &x in v {
            self.f64(x);
        }
    }
    fn vector(&mut self, v: &DVector<f64>) {
        self.f64s(v.as_slice());
    }
    fn matrix(&mut self, m: &DMatrix<f64>) {
        self.usize(m.nrows());
        self.usize(m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                self.f64(m[(i, j)]);
            }
        }
    }
    fn string(&mut self, s: &str) {
        self.usize(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Decoder<'a> {
    bytes: &'a [u8],
    pos: usize,
    section: &'static str,
}

impl<'a> Decoder<'a> {
    fn new(bytes: &'a [u8], section: &'static str) -> Self {
        Decoder { bytes, pos: 0, section }
    }

    fn corrupt(&self, what: &str) -> HemfError {
        HemfError::Corrupt(format!("section {}: {what}", self.section))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| self.corrupt("truncated"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().expect("16 bytes")))
    }
    /// A length or index, bounded by the remaining payload to reject garbage early.
    fn len(&mut self, unit: usize) -> Result<usize> {
        let v = self.u64()?;
        let remaining = (self.bytes.len() - self.pos) as u64;
        if v.saturating_mul(unit.max(1) as u64) > remaining && unit > 0 {
            return Err(self.corrupt("length exceeds payload"));
        }
        usize::try_from(v).map_err(|_| self.corrupt("length overflow"))
    }
    fn index(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| self.corrupt("index overflow"))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn vector(&mut self, dim: usize) -> Result<DVector<f64>> {
        let v = self.f64s()?;
        if v.len() != dim {
            return Err(self.corrupt("vector length"));
        }
        Ok(DVector::from_vec(v))
    }
    fn matrix(&mut self, dim: usize) -> Result<DMatrix<f64>> {
        let (r, c) = (self.len(0)?, self.len(0)?);
        if r != dim || c != dim {
            return Err(self.corrupt("matrix shape"));
        }
        let mut m = DMatrix::zeros(r, c);
        for i in 0..r {
            for j in 0..c {
                m[(i, j)] = self.f64()?;
            }
        }
        Ok(m)
    }
    fn string(&mut self) -> Result<String> {
        let n = self.len(1)?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| self.corrupt("invalid utf-8"))
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.corrupt("trailing bytes"));
        }
        Ok(())
    }
}

fn encode_hyper(e: &mut Encoder, h: &Hyperparameters) {
    e.usize(h.latent_dim);
    e.vector(&h.mu0);
    e.vector(&h.nu0);
    e.f64(h.lambda0);
    e.matrix(h.w0.as_matrix());
    for v in [h.iota0, h.alpha, h.beta, h.sigma2, h.spawn_threshold, h.merge_tau, h.lr_alpha, h.lr_iota] {
        e.f64(v);
    }
    e.u8(match h.community_update {
        CommunityUpdate::Printed => 0,
        CommunityUpdate::Conjugate => 1,
    });
}

fn decode_hyper(d: &mut Decoder) -> Result<Hyperparameters> {
    let l = d.len(0)?;
    if l == 0 || l > 4096 {
        return Err(d.corrupt("latent dimension"));
    }
    let mu0 = d.vector(l)?;
    let nu0 = d.vector(l)?;
    let lambda0 = d.f64()?;
    let w0 = SymmetricPd::new(d.matrix(l)?).map_err(|e| d.corrupt(&e.to_string()))?;
    let mut v = [0.0; 8];
    for x in &mut v {
        *x = d.f64()?;
    }
    let community_update = match d.u8()? {
        0 => CommunityUpdate::Printed,
        1 => CommunityUpdate::Conjugate,
        _ => return Err(d.corrupt("community update tag")),
    };
    let [iota0, alpha, beta, sigma2, spawn_threshold, merge_tau, lr_alpha, lr_iota] = v;
    Ok(Hyperparameters {
        latent_dim: l,
        mu0,
        nu0,
        lambda0,
        w0,
        iota0,
        alpha,
        beta,
        sigma2,
        spawn_threshold,
        merge_tau,
        lr_alpha,
        lr_iota,
        community_update,
    })
}

fn encode_side(e: &mut Encoder, s: &SideState) {
    e.usize(s.n_entities());
    e.usize(s.n_components());
    for f in &s.factors {
        e.vector(&f.mean);
        e.matrix(&f.second_moment);
    }
    for q in &s.memberships {
        e.f64s(&q.weights);
    }
    e.f64s(&s.sticks.eta1);
    e.f64s(&s.sticks.eta2);
    for c in &s.communities {
        e.vector(&c.mean);
        e.matrix(&c.mean_outer);
        e.matrix(c.scale.as_matrix());
        e.f64(c.dof);
        e.f64(c.kappa);
        e.matrix(&c.exp_prec);
        e.f64(c.exp_logdet);
        e.f64(c.scale_logdet);
    }
    e.f64s(&s.stats.mass);
    for (sum, outer) in s.stats.sum.iter().zip(&s.stats.sum_outer) {
        e.vector(sum);
        e.matrix(outer);
    }
}

fn decode_side(d: &mut Decoder, l: usize) -> Result<SideState> {
    let n = d.len(8)?;
    let comps = d.len(8)?;
    let mut factors = Vec::with_capacity(n);
    for _ in 0..n {
        let mean = d.vector(l)?;
        let second_moment = d.matrix(l)?;
        factors.push(FactorPosterior { mean, second_moment });
    }
    let mut memberships = Vec::with_capacity(n);
    for _ in 0..n {
        let weights = d.f64s()?;
        if weights.len() != comps {
            return Err(d.corrupt("membership length"));
        }
        memberships.push(MembershipPosterior { weights });
    }
    let eta1 = d.f64s()?;
    let eta2 = d.f64s()?;
    if eta1.len() != comps || eta2.len() != comps {
        return Err(d.corrupt("stick length"));
    }
    let mut communities = Vec::with_capacity(comps);
    for _ in 0..comps {
        let mean = d.vector(l)?;
        let mean_outer = d.matrix(l)?;
        let scale = SymmetricPd::new(d.matrix(l)?).map_err(|e| d.corrupt(&e.to_string()))?;
        let dof = d.f64()?;
        let kappa = d.f64()?;
        let exp_prec = d.matrix(l)?;
        let exp_logdet = d.f64()?;
        let scale_logdet = d.f64()?;
        communities.push(CommunityPosterior { mean, mean_outer, scale, dof, kappa, exp_prec, exp_logdet, scale_logdet });
    }
    let mass = d.f64s()?;
    if mass.len() != comps {
        return Err(d.corrupt("statistics length"));
    }
    let mut sum = Vec::with_capacity(comps);
    let mut sum_outer = Vec::with_capacity(comps);
    for _ in 0..comps {
        sum.push(d.vector(l)?);
        sum_outer.push(d.matrix(l)?);
    }
    Ok(SideState {
        factors,
        memberships,
        sticks: StickPosterior { eta1, eta2 },
        communities,
        stats: CommunityStats { mass, sum, sum_outer },
    })
}

fn encode_sections(c: &Checkpoint) -> Vec<([u8; 4], Vec<u8>)> {
    let mut out = Vec::new();
    let mut e = Encoder(Vec::new());
    encode_hyper(&mut e, &c.state.hyper);
    out.push((*b"HYPR", e.0));
    for (tag, side) in [(*b"USER", &c.state.users), (*b"ITEM", &c.state.items)] {
        let mut e = Encoder(Vec::new());
        encode_side(&mut e, side);
        out.push((tag, e.0));
    }
    let mut e = Encoder(Vec::new());
    e.f64s(&c.state.elbo_trace);
    out.push((*b"ELBO", e.0));

    let mut e = Encoder(Vec::new());
    e.0.extend_from_slice(&c.state.rng.get_seed());
    e.u64(c.state.rng.get_stream());
    e.0.extend_from_slice(&c.state.rng.get_word_pos().to_le_bytes());
    out.push((*b"RNGS", e.0));

    let mut e = Encoder(Vec::new());
    e.usize(c.observed.n_users());
    e.usize(c.observed.n_items());
    e.usize(c.observed.len());
    for r in c.observed.entries() {
        e.usize(r.user);
        e.usize(r.item);
        e.f64(r.value);
    }
    out.push((*b"OBSV", e.0));

    let p = &c.progress;
    let mut e = Encoder(Vec::new());
    e.u64(p.chunks_processed);
    e.usize(p.observed_at_last_pass);
    e.usize(p.pending_new.len());
    for &(u, i) in &p.pending_new {
        e.usize(u);
        e.usize(i);
    }
    match &p.config {
        None => e.u8(0),
        Some(cfg) => {
            e.u8(1);
            e.u8(match cfg.globals {
                GlobalUpdate::Printed => 0,
                GlobalUpdate::Recomputed => 1,
            });
            e.usize(cfg.propagation_sweeps);
            e.usize(cfg.empirical_every.unwrap_or(0));
            e.u8(cfg.spawn as u8);
            e.u8(cfg.merge as u8);
        }
    }
    out.push((*b"PROG", e.0));

    let mut e = Encoder(Vec::new());
    for map in [&c.users, &c.items] {
        e.usize(map.len());
        for id in map.ids() {
            e.string(id);
        }
    }
    out.push((*b"IDS_", e.0));
    out
}

pub fn encode_checkpoint(c: &Checkpoint) -> Vec<u8> {
    let sections = encode_sections(c);
    let mut e = Encoder(MAGIC.to_vec());
    e.u32(CHECKPOINT_VERSION);
    e.u32(sections.len() as u32);
    for (tag, payload) in sections {
        e.0.extend_from_slice(&tag);
        e.u64(payload.len() as u64);
        e.0.extend_from_slice(&payload);
    }
    let crc = crc32fast::hash(&e.0);
    e.u32(crc);
    e.0
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 12 || &bytes[..8] != MAGIC {
        return Err(HemfError::Corrupt("not a checkpoint file (bad magic or too short)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(HemfError::SchemaVersion { found: version, supported: CHECKPOINT_VERSION });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(HemfError::Corrupt("checksum mismatch".into()));
    }
    let mut d = Decoder::new(&body[12..], "header");
    let count = d.u32()?;
    let mut found: std::collections::HashMap<[u8; 4], &[u8]> = std::collections::HashMap::new();
    for _ in 0..count {
        let tag: [u8; 4] = d.take(4)?.try_into().expect("4 bytes");
        let len = d.len(1)?;
        found.insert(tag, d.take(len)?);
    }
    d.finish()?;
    let section = |tag: &[u8; 4], name: &'static str| -> Result<Decoder> {
        found
            .get(tag)
            .map(|b| Decoder::new(b, name))
            .ok_or_else(|| HemfError::Corrupt(format!("missing section {name}")))
    };

    let mut d = section(b"HYPR", "HYPR")?;
    let hyper = decode_hyper(&mut d)?;
    d.finish()?;
    let l = hyper.latent_dim;
    let mut d = section(b"USER", "USER")?;
    let users = decode_side(&mut d, l)?;
    d.finish()?;
    let mut d = section(b"ITEM", "ITEM")?;
    let items = decode_side(&mut d, l)?;
    d.finish()?;
    let mut d = section(b"ELBO", "ELBO")?;
    let elbo_trace = d.f64s()?;
    d.finish()?;
    let mut d = section(b"RNGS", "RNGS")?;
    let seed: [u8; 32] = d.take(32)?.try_into().expect("32 bytes");
    let stream = d.u64()?;
    let word_pos = d.u128()?;
    d.finish()?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    let state = ModelState { users, items, hyper, elbo_trace, rng };

    let observed = match found.get(b"OBSV") {
        None => SparseRatings::empty(state.users.n_entities(), state.items.n_entities()),
        Some(b) => {
            let mut d = Decoder::new(b, "OBSV");
            let (nu, ni) = (d.index()?, d.index()?);
            let n = d.len(24)?;
            let mut entries = Vec::with_capacity(n);
            for _ in 0..n {
                entries.push(Rating::new(d.index()?, d.index()?, d.f64()?));
            }
            d.finish()?;
            SparseRatings::new(nu, ni, entries).map_err(|e| HemfError::Corrupt(format!("section OBSV: {e}")))?
        }
    };

    let progress = match found.get(b"PROG") {
        None => StreamProgress::default(),
        Some(b) => {
            let mut d = Decoder::new(b, "PROG");
            let chunks_processed = d.u64()?;
            let observed_at_last_pass = d.index()?;
            let n = d.len(16)?;
            let mut pending_new = Vec::with_capacity(n);
            for _ in 0..n {
                pending_new.push((d.index()?, d.index()?));
            }
            let config = match d.u8()? {
                0 => None,
                1 => {
                    let globals = match d.u8()? {
                        0 => GlobalUpdate::Printed,
                        1 => GlobalUpdate::Recomputed,
                        _ => return Err(d.corrupt("globals tag")),
                    };
                    let propagation_sweeps = d.index()?;
                    let every = d.index()?;
                    let spawn = d.u8()? != 0;
                    let merge = d.u8()? != 0;
                    Some(OnlineConfig {
                        globals,
                        propagation_sweeps,
                        empirical_every: (every > 0).then_some(every),
                        spawn,
                        merge,
                    })
                }
                _ => return Err(d.corrupt("config tag")),
            };
            d.finish()?;
            StreamProgress { chunks_processed, pending_new, observed_at_last_pass, config }
        }
    };

    let (users, items) = match found.get(b"IDS_") {
        None => (IdMap::new(), IdMap::new()),
        Some(b) => {
            let mut d = Decoder::new(b, "IDS_");
            let mut maps = Vec::new();
            for _ in 0..2 {
                let n = d.len(8)?;
                let ids = (0..n).map(|_| d.string()).collect::<Result<Vec<_>>>()?;
                maps.push(IdMap::from_ids(ids).map_err(|e| HemfError::Corrupt(format!("section IDS_: {e}")))?);
            }
            d.finish()?;
            let items = maps.pop().expect("two maps");
            (maps.pop().expect("two maps"), items)
        }
    };

    for s in [&state.users, &state.items] {
        s.check_consistency().map_err(|e| HemfError::Corrupt(e.to_string()))?;
    }
    Ok(Checkpoint { state, observed, progress, users, items })
}

/// Atomic write: temporary sibling, fsync, rename.
pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(checkpoint);
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| HemfError::InvalidConfig(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    let result = (|| -> Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(|e| e.context(path.display().to_string()))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| HemfError::from(e).context(path.display().to_string()))?;
    decode_checkpoint(&bytes).map_err(|e| e.context(path.display().to_string()))
}
