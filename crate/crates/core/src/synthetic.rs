//! Planted-group dataset generator. Each user belongs to one latent group,
//! each group favours one item theme, and every item title and description
//! carries its theme's vocabulary. Every user rates the same number of items
//! from each theme, so all users share one expected like rate and only the
//! group explains who likes what.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};

const THEMES: [(&str, [&str; 6]); 4] = [
    ("Space", ["rockets", "planets", "orbit", "astronauts", "galaxy", "comets"]),
    ("Garden", ["flowers", "seeds", "orchards", "blossoms", "herbs", "meadows"]),
    ("Ocean", ["waves", "sailors", "reefs", "harbors", "tides", "islands"]),
    ("Castle", ["knights", "kings", "towers", "battles", "dragons", "queens"]),
];

const NOUNS: [&str; 10] =
    ["Tales", "Secrets", "Journey", "Chronicle", "Dreams", "Letters", "Song", "Guide", "Atlas", "Legacy"];

const SHARED: [&str; 6] = ["family", "friendship", "mystery", "humor", "history", "courage"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub users: usize,
    pub items: usize,
    pub groups: usize,
    pub events_per_user: usize,
    /// Probability of liking an item of the group's theme, and of disliking
    /// one of another theme.
    pub affinity: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self { users: 500, items: 300, groups: 2, events_per_user: 20, affinity: 0.85, seed: 7 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    /// `user::item::rating::timestamp` lines.
    pub ratings: String,
    /// `id<TAB>title<TAB>description` lines.
    pub items: String,
    pub user_group: Vec<usize>,
    pub item_theme: Vec<usize>,
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    if cfg.groups == 0 || cfg.groups > THEMES.len() {
        return Err(Error::Config(format!("synthetic groups must be in 1..={}", THEMES.len())));
    }
    let per_theme = cfg.items / cfg.groups.max(1);
    if cfg.users == 0 || cfg.events_per_user == 0 || cfg.events_per_user.div_ceil(cfg.groups.max(1)) > per_theme {
        return Err(Error::Config("synthetic sizes are inconsistent".into()));
    }
    if !(0.0..=1.0).contains(&cfg.affinity) {
        return Err(Error::Config("synthetic affinity must be in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let item_theme: Vec<usize> = (0..cfg.items).map(|i| i % cfg.groups).collect();
    let mut items = String::new();
    for (i, &t) in item_theme.iter().enumerate() {
        let (theme, words) = THEMES[t];
        let noun = NOUNS[rng.gen_range(0..NOUNS.len())];
        let mut desc: Vec<&str> = words.choose_multiple(&mut rng, 3).copied().collect();
        desc.push(SHARED[rng.gen_range(0..SHARED.len())]);
        desc.shuffle(&mut rng);
        let _ = writeln!(items, "{}\t{theme} {noun}\tA story of {}.", i + 1, desc.join(" and "));
    }

    let by_theme: Vec<Vec<usize>> =
        (0..cfg.groups).map(|t| (0..cfg.items).filter(|&i| item_theme[i] == t).collect()).collect();
    let user_group: Vec<usize> = (0..cfg.users).map(|_| rng.gen_range(0..cfg.groups)).collect();
    let mut ratings = String::new();
    for (u, &g) in user_group.iter().enumerate() {
        let mut counts = vec![cfg.events_per_user / cfg.groups; cfg.groups];
        for t in rand::seq::index::sample(&mut rng, cfg.groups, cfg.events_per_user % cfg.groups) {
            counts[t] += 1;
        }
        let mut picked: Vec<usize> = Vec::with_capacity(cfg.events_per_user);
        for (pool, &n) in by_theme.iter().zip(&counts) {
            picked.extend(pool.choose_multiple(&mut rng, n));
        }
        picked.shuffle(&mut rng);
        let mut times: Vec<i64> = (0..cfg.events_per_user).map(|_| rng.gen_range(0..100_000)).collect();
        times.sort_unstable();
        for (&item, t) in picked.iter().zip(times) {
            let p_like = if item_theme[item] == g { cfg.affinity } else { 1.0 - cfg.affinity };
            let rating = if rng.gen::<f64>() < p_like { 5 } else { rng.gen_range(1..=2) };
            let _ = writeln!(ratings, "{}::{}::{rating}::{t}", u + 1, item + 1);
        }
    }
    Ok(SyntheticData { ratings, items, user_group, item_theme })
}

/// A configuration sized for the synthetic data on one CPU core.
pub fn desk_config(dir: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.output_dir = dir.join("run");
    cfg.data.ratings = dir.join("ratings.dat");
    cfg.data.items = Some(dir.join("items.tsv"));
    cfg.data.min_interactions = 3;
    cfg.data.max_history = 5;
    cfg.data.keywords = 3;
    cfg.reasons.sample_n = 600;
    cfg.collab.dim = 16;
    cfg.collab.epochs = 20;
    cfg.tokenizer.max_vocab = 1000;
    cfg.lm.d_model = 32;
    cfg.lm.n_layers = 2;
    cfg.lm.n_heads = 2;
    cfg.lm.context_len = 256;
    cfg.lm.mlp_ratio = 4;
    cfg.mix.learning_rate = 3e-3;
    cfg.mix.weight_decay = 1e-3;
    cfg.mix.steps = 400;
    cfg.mix.batch_size = 8;
    cfg.experts.steps = 600;
    cfg.experts.learning_rate = 5e-3;
    cfg.experts.trainable_layers = 2;
    cfg.projector.steps = 120;
    cfg.projector.learning_rate = 1e-3;
    cfg.eval.reason_samples = 16;
    cfg.eval.max_new_tokens = 48;
    cfg
}

/// Writes `ratings.dat`, `items.tsv` and `thinkrec.toml` into `dir`.
pub fn write_bundle(dir: &Path, cfg: &SyntheticConfig) -> Result<PathBuf> {
    let data = generate(cfg)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, text: &str| {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("ratings.dat", &data.ratings)?;
    write("items.tsv", &data.items)?;
    let mut pc = desk_config(Path::new(""));
    pc.output_dir = PathBuf::from("run");
    let mut groups = String::from("user\tgroup\n");
    for (u, g) in data.user_group.iter().enumerate() {
        let _ = writeln!(groups, "{}\t{g}", u + 1);
    }
    write("groups.tsv", &groups)?;
    let path = dir.join("thinkrec.toml");
    fs::write(&path, pc.to_toml()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
