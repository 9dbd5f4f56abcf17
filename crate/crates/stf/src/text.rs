//! Line-oriented text formats: layouts, dataset manifests, and key=value
//! configs. Whitespace separates fields and `#` starts a comment.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use stf_core::topology::{BonePairs, Layout, SkeletonGraph};

use crate::error::{CliError, Result};

/// Non-empty lines with comments stripped, paired with 1-based line numbers.
fn lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(i, line)| {
        let line = line.split('#').next().unwrap_or("");
        let fields: Vec<&str> = line.split_whitespace().collect();
        (!fields.is_empty()).then_some((i + 1, fields))
    })
}

fn parse<T: FromStr>(path: &Path, line: usize, field: &str, what: &str) -> Result<T> {
    field
        .parse()
        .map_err(|_| CliError::format(path, format!("line {line}: invalid {what} '{field}'")))
}

fn arity(path: &Path, line: usize, fields: &[&str], n: usize) -> Result<()> {
    if fields.len() != n {
        return Err(CliError::format(
            path,
            format!(
                "line {line}: '{}' takes {} fields, got {}",
                fields[0],
                n - 1,
                fields.len() - 1
            ),
        ));
    }
    Ok(())
}

/// Parses a layout file. Grains listed in the file are numbered from 1;
/// grain 0 is always the joint identity. Without `bone` lines the bone tree
/// is derived from the graph.
pub fn parse_layout(path: &Path, text: &str) -> Result<Layout> {
    let mut name = None;
    let mut joints = None;
    let mut center = None;
    let mut edges = Vec::new();
    let mut bones = Vec::new();
    let mut grains: BTreeMap<usize, BTreeMap<usize, Vec<usize>>> = BTreeMap::new();
    for (ln, f) in lines(text) {
        match f[0] {
            "name" => {
                arity(path, ln, &f, 2)?;
                name = Some(f[1].to_string());
            }
            "joints" => {
                arity(path, ln, &f, 2)?;
                joints = Some(parse::<usize>(path, ln, f[1], "joint count")?);
            }
            "center" => {
                arity(path, ln, &f, 2)?;
                center = Some(parse::<usize>(path, ln, f[1], "center joint")?);
            }
            "edge" | "bone" => {
                arity(path, ln, &f, 3)?;
                let pair = (
                    parse(path, ln, f[1], "joint")?,
                    parse(path, ln, f[2], "joint")?,
                );
                if f[0] == "edge" {
                    edges.push(pair)
                } else {
                    bones.push(pair)
                }
            }
            "grain" => {
                if f.len() != 6 || f[2] != "part" || f[4] != "joints" {
                    return Err(CliError::format(
                        path,
                        format!("line {ln}: expected 'grain <g> part <p> joints <i,j,...>'"),
                    ));
                }
                let g: usize = parse(path, ln, f[1], "grain index")?;
                let p: usize = parse(path, ln, f[3], "part index")?;
                if g == 0 {
                    return Err(CliError::format(
                        path,
                        format!("line {ln}: grain 0 is the implicit joint identity"),
                    ));
                }
                let members = f[5]
                    .split(',')
                    .map(|j| parse(path, ln, j, "joint"))
                    .collect::<Result<Vec<usize>>>()?;
                if grains.entry(g).or_default().insert(p, members).is_some() {
                    return Err(CliError::format(
                        path,
                        format!("line {ln}: grain {g} part {p} defined twice"),
                    ));
                }
            }
            other => {
                return Err(CliError::format(
                    path,
                    format!("line {ln}: unknown directive '{other}'"),
                ))
            }
        }
    }
    let joints = joints.ok_or_else(|| CliError::format(path, "missing 'joints' line"))?;
    let center = center.ok_or_else(|| CliError::format(path, "missing 'center' line"))?;
    let name = name.unwrap_or_else(|| {
        path.file_stem()
            .map_or("layout".into(), |s| s.to_string_lossy().into_owned())
    });
    let mut part_grains = Vec::new();
    for (i, (g, parts)) in grains.into_iter().enumerate() {
        if g != i + 1 {
            return Err(CliError::format(
                path,
                format!("grains must be numbered 1, 2, ...; found grain {g}"),
            ));
        }
        if parts.keys().copied().ne(0..parts.len()) {
            return Err(CliError::format(
                path,
                format!("grain {g}: parts must be numbered 0, 1, ..."),
            ));
        }
        part_grains.push(parts.into_values().collect::<Vec<_>>());
    }
    let ctx = |e: stf_core::Error| CliError::format(path, e.to_string());
    let graph = SkeletonGraph::new(joints, edges, center).map_err(ctx)?;
    let bones = if bones.is_empty() {
        None
    } else {
        Some(BonePairs::new(joints, center, &bones).map_err(ctx)?)
    };
    Layout::new(&name, graph, &part_grains, bones).map_err(ctx)
}

pub fn format_layout(layout: &Layout) -> String {
    let mut s = String::new();
    let v = layout.num_joints();
    writeln!(s, "name {}", layout.name).unwrap();
    writeln!(s, "joints {v}").unwrap();
    writeln!(s, "center {}", layout.graph.center()).unwrap();
    for &(a, b) in layout.graph.edges() {
        writeln!(s, "edge {a} {b}").unwrap();
    }
    for grain in &layout.grains[1..] {
        for p in 0..grain.part_count() {
            let members: Vec<String> = (0..v)
                .filter(|&j| grain.part_of(j) == p)
                .map(|j| j.to_string())
                .collect();
            writeln!(
                s,
                "grain {} part {p} joints {}",
                grain.grain_id(),
                members.join(",")
            )
            .unwrap();
        }
    }
    for (a, b) in layout.bones.pairs() {
        writeln!(s, "bone {a} {b}").unwrap();
    }
    s
}

/// A built-in layout id, or a path to a layout file.
pub fn resolve_layout(spec: &str) -> Result<Layout> {
    match Layout::builtin(spec) {
        Ok(l) => Ok(l),
        Err(_) if Path::new(spec).exists() => {
            let path = Path::new(spec);
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            parse_layout(path, &text)
        }
        Err(e) => Err(e.into()),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Resolved against the manifest's directory when relative.
    pub path: PathBuf,
    pub label: usize,
    pub split: String,
}

/// `layout <id>`, `class <name>` lines in label order, then
/// `sample <path> <label> <split>` lines.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub layout: String,
    pub classes: Vec<String>,
    pub samples: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn split(&self, split: &str) -> impl Iterator<Item = &ManifestEntry> + '_ {
        let split = split.to_string();
        self.samples.iter().filter(move |s| s.split == split)
    }
}

pub fn parse_manifest(path: &Path, text: &str) -> Result<Manifest> {
    let base = path.parent().unwrap_or(Path::new(""));
    let (mut layout, mut classes, mut samples) = (None, Vec::new(), Vec::new());
    for (ln, f) in lines(text) {
        match f[0] {
            "layout" => {
                arity(path, ln, &f, 2)?;
                layout = Some(f[1].to_string());
            }
            "class" => {
                arity(path, ln, &f, 2)?;
                classes.push(f[1].to_string());
            }
            "sample" => {
                arity(path, ln, &f, 4)?;
                let label: usize = parse(path, ln, f[2], "label")?;
                let p = Path::new(f[1]);
                let path = if p.is_absolute() {
                    p.to_path_buf()
                } else {
                    base.join(p)
                };
                samples.push(ManifestEntry {
                    path,
                    label,
                    split: f[3].to_string(),
                });
            }
            other => {
                return Err(CliError::format(
                    path,
                    format!("line {ln}: unknown directive '{other}'"),
                ))
            }
        }
    }
    let layout = layout.ok_or_else(|| CliError::format(path, "missing 'layout' line"))?;
    if classes.len() < 2 {
        return Err(CliError::format(
            path,
            "a manifest needs at least two 'class' lines",
        ));
    }
    if let Some(s) = samples.iter().find(|s| s.label >= classes.len()) {
        return Err(CliError::format(
            path,
            format!(
                "sample {} has label {} but only {} classes",
                s.path.display(),
                s.label,
                classes.len()
            ),
        ));
    }
    Ok(Manifest {
        layout,
        classes,
        samples,
    })
}

/// Writes sample paths relative to `dir` when they live under it.
pub fn format_manifest(manifest: &Manifest, dir: &Path) -> String {
    let mut s = format!("layout {}\n", manifest.layout);
    for c in &manifest.classes {
        writeln!(s, "class {c}").unwrap();
    }
    for e in &manifest.samples {
        let p = e.path.strip_prefix(dir).unwrap_or(&e.path);
        writeln!(s, "sample {} {} {}", p.display(), e.label, e.split).unwrap();
    }
    s
}

/// Ordered `key = value` pairs. Later keys override earlier ones.
pub fn parse_key_values(path: &Path, text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            CliError::format(path, format!("line {}: expected 'key = value'", i + 1))
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}
