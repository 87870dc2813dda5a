//! Subcommand implementations and the state they share.

pub mod analyze;
pub mod eval;
pub mod fit;
pub mod probe;
pub mod unlearn;
pub mod validate;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use skul_core::{read_dump, CaptureKind, DumpHeader, DumpReader, SkillDistribution, ToyModel};

use crate::config::{LoadedConfig, Role};
use crate::error::{CliError, Result};
use crate::layout::{sha256_bytes, FileHash, Layout, Recorder};

pub const KINDS: [CaptureKind; 2] = [
    CaptureKind::PreActivationAllTokens,
    CaptureKind::KeyVectorLastToken,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Na,
    Ksd,
    Both,
}

impl Method {
    pub fn na(self) -> bool {
        matches!(self, Method::Na | Method::Both)
    }

    pub fn ksd(self) -> bool {
        matches!(self, Method::Ksd | Method::Both)
    }
}

pub type Queries = Vec<Vec<u32>>;

/// Everything a command needs: the validated config and the output tree.
pub struct Ctx {
    pub config: LoadedConfig,
    pub layout: Layout,
}

impl Ctx {
    pub fn model(&self) -> Result<ToyModel> {
        let cfg = self.config.cfg.model.clone().ok_or_else(|| {
            CliError::Config(format!(
                "{}: this command needs a [model] section",
                self.config.path.display()
            ))
        })?;
        Ok(ToyModel::init(cfg)?)
    }

    pub fn label(&self, role: Role) -> String {
        self.config.label(role)
    }

    /// Where the dump of `role` and `kind` is read from, if the source has one.
    pub fn dump_path(&self, role: Role, kind: CaptureKind) -> Option<PathBuf> {
        let src = self.config.source(role);
        if src.toy.is_some() {
            return Some(self.layout.dump(&self.label(role), kind));
        }
        let d = src.dumps.as_ref()?;
        let p = match kind {
            CaptureKind::PreActivationAllTokens => d.preact.as_ref(),
            CaptureKind::KeyVectorLastToken => d.keyvec.as_ref(),
        }?;
        Some(self.config.resolve(p))
    }

    pub fn require_dump(&self, role: Role, kind: CaptureKind) -> Result<PathBuf> {
        let path = self.dump_path(role, kind).ok_or_else(|| {
            CliError::MissingInput(format!(
                "[{}] provides no {} dump",
                role.key(),
                kind.short_name()
            ))
        })?;
        if !path.exists() {
            let hint = if self.config.source(role).toy.is_some() {
                " (run `skul probe` first)"
            } else {
                ""
            };
            return Err(CliError::MissingInput(format!("{}{hint}", path.display())));
        }
        Ok(path)
    }

    /// Probe and held-out queries of a synthetic source; the first
    /// `probe_queries` are probed, the rest are held out for evaluation.
    pub fn queries(&self, role: Role) -> Result<(Queries, Queries)> {
        let src = self.config.source(role);
        let toy = src.toy.as_ref().ok_or_else(|| {
            CliError::Config(format!(
                "{}: [{}] has no `toy` source; queries are only available for synthetic skills",
                self.config.path.display(),
                role.key()
            ))
        })?;
        let spec = toy.spec(self.label(role));
        let mut all =
            skul_core::make_skill_dataset(&spec, toy.probe_queries + toy.held_out_queries)?;
        let held_out = all.split_off(toy.probe_queries);
        Ok((all, held_out))
    }

    /// Fitted distributions of every layer, in layer order.
    pub fn load_dists(
        &self,
        role: Role,
        kind: CaptureKind,
        rec: &mut Recorder<'_>,
    ) -> Result<Vec<SkillDistribution>> {
        let label = self.label(role);
        let mut out = Vec::new();
        loop {
            let path = self.layout.dist(&label, kind, out.len());
            if !path.exists() {
                break;
            }
            let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
            let dist = SkillDistribution::from_json(&text)
                .map_err(|e| CliError::stats(path.display().to_string(), e))?;
            rec.input(&path)?;
            out.push(dist);
        }
        if out.is_empty() {
            return Err(CliError::MissingInput(format!(
                "no {} distributions for `{label}` under {} (run `skul fit` first)",
                kind.short_name(),
                self.layout.root().join("dists").display()
            )));
        }
        Ok(out)
    }

    pub fn config_hash(&self) -> FileHash {
        FileHash {
            path: self.config.path.to_string_lossy().replace('\\', "/"),
            sha256: sha256_bytes(&self.config.bytes),
        }
    }

    pub fn seeds(&self) -> BTreeMap<String, u64> {
        let mut s = BTreeMap::new();
        s.insert("adjust".to_owned(), self.config.cfg.seed);
        if let Some(m) = &self.config.cfg.model {
            s.insert("model".to_owned(), m.seed);
        }
        for role in Role::BOTH {
            if let Some(t) = &self.config.source(role).toy {
                s.insert(format!("{}_dataset", role.key()), t.seed);
            }
        }
        s
    }

    pub fn finish(
        &self,
        rec: Recorder<'_>,
        command: &str,
        parameters: serde_json::Value,
    ) -> Result<PathBuf> {
        rec.finish(command, self.config_hash(), self.seeds(), parameters)
    }
}

pub fn open_dump(path: &Path) -> Result<DumpReader<BufReader<File>>> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    read_dump(BufReader::new(file)).map_err(|e| CliError::dump(path, e))
}

/// Every record of `layer` in dump order.
pub fn layer_vectors(path: &Path, layer: usize) -> Result<(DumpHeader, Vec<Vec<f32>>)> {
    let reader = open_dump(path)?;
    let header = reader.header().clone();
    if layer >= header.num_layers() {
        return Err(CliError::MissingInput(format!(
            "{} has {} layers, layer {layer} requested",
            path.display(),
            header.num_layers()
        )));
    }
    let mut out = Vec::new();
    for rec in reader {
        let rec = rec.map_err(|e| CliError::dump(path, e))?;
        if rec.layer as usize == layer {
            out.push(rec.values);
        }
    }
    Ok((header, out))
}

/// Layers guarded by KSD: the configured list or the last layer.
pub fn monitored_layers(ctx: &Ctx, num_layers: usize) -> Result<Vec<usize>> {
    let layers = match &ctx.config.cfg.unlearn.monitored_layers {
        Some(l) => {
            let mut l = l.clone();
            l.sort_unstable();
            l.dedup();
            l
        }
        None => vec![num_layers - 1],
    };
    if let Some(&l) = layers.iter().find(|&&l| l >= num_layers) {
        return Err(CliError::Config(format!(
            "{}: monitored layer {l} does not exist (distributions cover {num_layers} layers)",
            ctx.config.path.display()
        )));
    }
    Ok(layers)
}
