//! Zoo files: one `<rank> <path>` line per member, an optional
//! `tree <nesting>` line, `#` comments. Relative paths are resolved against
//! the file's directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ihd_core::ensemble::RankTree;

#[derive(Clone, Debug, PartialEq)]
pub struct ZooFile {
    pub entries: Vec<(u32, PathBuf)>,
    pub tree: Option<String>,
}

impl ZooFile {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading zoo {}", path.display()))?;
        let parent = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let base = fs::canonicalize(parent).with_context(|| format!("resolving {}", parent.display()))?;
        let mut entries = Vec::new();
        let mut tree = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (head, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
            if head == "tree" {
                RankTree::parse(rest.trim()).with_context(|| format!("{}:{}", path.display(), i + 1))?;
                tree = Some(rest.trim().to_string());
                continue;
            }
            let rank: u32 = head
                .parse()
                .with_context(|| format!("{}:{}: `{head}` is not a rank", path.display(), i + 1))?;
            if rest.trim().is_empty() {
                bail!("{}:{}: rank {rank} has no path", path.display(), i + 1);
            }
            entries.push((rank, base.join(rest.trim())));
        }
        if entries.is_empty() {
            bail!("zoo {} lists no members", path.display());
        }
        Ok(Self { entries, tree })
    }

    pub fn rank_tree(&self) -> Result<Option<RankTree>> {
        Ok(self.tree.as_deref().map(RankTree::parse).transpose()?)
    }

    /// Renders with paths relative to `dir`, so a moved tree stays valid.
    pub fn render(&self, dir: &Path) -> String {
        let mut out = String::new();
        if let Some(t) = &self.tree {
            writeln!(out, "tree {t}").expect("writing to a String");
        }
        for (rank, p) in &self.entries {
            let shown = pathdiff::diff_paths(p, dir).unwrap_or_else(|| p.clone());
            writeln!(out, "{rank} {}", shown.display()).expect("writing to a String");
        }
        out
    }
}
