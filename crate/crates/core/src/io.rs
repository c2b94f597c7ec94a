//! On-disk formats.
//!
//! A trajectory directory holds `manifest.json` and one `round_<n>.bin` per
//! round. Each round file stores, for every group in manifest order, the mask
//! packed least-significant-bit first (row-major, zero-padded to a whole
//! byte) followed by the full weight array as little-endian `f64`.
//!
//! JSON output is deterministic: fields appear in declaration order and every
//! float is written with 17 significant digits.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::ser::Serialize;
use serde::{Deserialize, Serialize as SerializeDerive};
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::error::{Error, FormatError, Result};
use crate::flow::{ComparisonVerdict, EigenReport, FlowObservables, FlowReport, ProjectionPoint};
use crate::nn::MaskState;
use crate::scaling::FitResult;
use crate::tensor::Tensor2;
use crate::trajectory::{ImpTrajectory, RoundRecord, RunManifest};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SUMMARY_HEADER: [&str; 5] = ["round", "group", "masked_magnitude", "unpruned_count", "total_count"];
pub const SIDECAR_HEADER: [&str; 2] = ["round", "x"];
pub const CURVE_HEADER: [&str; 2] = ["density", "error"];

pub fn round_file_name(n: usize) -> String {
    format!("round_{n}.bin")
}

/// Pretty printer that writes floats as `{:.16e}`.
struct ExactFloats(PrettyFormatter<'static>);

impl Formatter for ExactFloats {
    fn write_f64<W: ?Sized + std::io::Write>(&mut self, w: &mut W, value: f64) -> std::io::Result<()> {
        write!(w, "{value:.16e}")
    }
    fn write_f32<W: ?Sized + std::io::Write>(&mut self, w: &mut W, value: f32) -> std::io::Result<()> {
        self.write_f64(w, f64::from(value))
    }
    fn begin_array<W: ?Sized + std::io::Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + std::io::Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + std::io::Write>(&mut self, w: &mut W, first: bool) -> std::io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + std::io::Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + std::io::Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + std::io::Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + std::io::Write>(&mut self, w: &mut W, first: bool) -> std::io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + std::io::Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + std::io::Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_object_value(w)
    }
}

/// Deterministic JSON encoding used for every file this crate writes.
pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, ExactFloats(PrettyFormatter::new()));
    value
        .serialize(&mut ser)
        .map_err(|e| FormatError::Malformed(format!("cannot encode JSON: {e}")))?;
    out.push(b'\n');
    Ok(out)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, SerializeDerive, Deserialize)]
struct RoundMeta {
    index: usize,
    density: f64,
    x: f64,
    eval_error: f64,
}

#[derive(Debug, Clone, PartialEq, SerializeDerive, Deserialize)]
struct ManifestFile {
    format_version: u32,
    #[serde(flatten)]
    manifest: RunManifest,
    round_count: usize,
    rounds: Vec<RoundMeta>,
}

/// Packs mask bits least-significant-bit first.
pub fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

pub fn unpack_bits(bytes: &[u8], len: usize) -> Vec<bool> {
    (0..len).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

fn encode_round(traj: &ImpTrajectory, record: &RoundRecord) -> Result<Vec<u8>> {
    let groups = &traj.manifest.groups;
    if record.mask.bits.len() != groups.len() || record.weights.len() != groups.len() {
        return Err(FormatError::Shape {
            context: format!("round {}", record.round_index),
            detail: format!("expected {} groups", groups.len()),
        }
        .into());
    }
    let mut out = Vec::new();
    for (g, entry) in groups.iter().enumerate() {
        let w = &record.weights[g];
        let bits = &record.mask.bits[g];
        if w.shape() != (entry.rows, entry.cols) || bits.len() != w.len() {
            return Err(FormatError::Shape {
                context: format!("round {}, group `{}`", record.round_index, entry.name),
                detail: format!("expected {}x{}", entry.rows, entry.cols),
            }
            .into());
        }
        out.extend(pack_bits(bits));
        for v in w.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Writes `manifest.json` and `round_<n>.bin` files into `dir`, creating it if needed.
pub fn write_trajectory(traj: &ImpTrajectory, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let file = ManifestFile {
        format_version: FORMAT_VERSION,
        manifest: traj.manifest.clone(),
        round_count: traj.rounds.len(),
        rounds: traj
            .rounds
            .iter()
            .map(|r| RoundMeta {
                index: r.round_index,
                density: r.density,
                x: r.x_n,
                eval_error: r.eval_error,
            })
            .collect(),
    };
    for (n, record) in traj.rounds.iter().enumerate() {
        if record.round_index != n {
            return Err(FormatError::Malformed(format!("round {n} is labelled {}", record.round_index)).into());
        }
        write_file(&dir.join(round_file_name(n)), &encode_round(traj, record)?)?;
    }
    write_file(&dir.join(MANIFEST_FILE), &to_json_bytes(&file)?)
}

fn decode_round(path: &Path, n: usize, manifest: &RunManifest, bytes: &[u8]) -> Result<(MaskState, Vec<Tensor2>)> {
    let mut at = 0usize;
    let mut bits = Vec::with_capacity(manifest.groups.len());
    let mut weights = Vec::with_capacity(manifest.groups.len());
    for entry in &manifest.groups {
        let len = entry.rows * entry.cols;
        let mask_len = len.div_ceil(8);
        let need = at + mask_len + 8 * len;
        if bytes.len() < need {
            return Err(FormatError::Truncated {
                path: path.to_path_buf(),
                detail: format!("round {n}: group `{}` needs bytes up to {need}, file has {}", entry.name, bytes.len()),
            }
            .into());
        }
        let mask_bytes = &bytes[at..at + mask_len];
        if len % 8 != 0 && mask_bytes[mask_len - 1] >> (len % 8) != 0 {
            return Err(FormatError::Malformed(format!(
                "round {n}, group `{}`: nonzero mask padding bits",
                entry.name
            ))
            .into());
        }
        let group_bits = unpack_bits(mask_bytes, len);
        at += mask_len;
        let data: Vec<f64> = bytes[at..at + 8 * len]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        at += 8 * len;
        if let Some((index, &value)) = data
            .iter()
            .enumerate()
            .find(|&(i, v)| !group_bits[i] && v.to_bits() != 0)
        {
            return Err(FormatError::NonzeroPruned {
                round: n,
                group: entry.name.clone(),
                index,
                value,
            }
            .into());
        }
        bits.push(group_bits);
        weights.push(Tensor2::from_vec(entry.rows, entry.cols, data)?);
    }
    if at != bytes.len() {
        return Err(FormatError::Shape {
            context: format!("round {n}"),
            detail: format!("{} trailing bytes after the last group", bytes.len() - at),
        }
        .into());
    }
    Ok((MaskState { bits }, weights))
}

/// Reads and validates a trajectory directory.
pub fn read_trajectory(dir: impl AsRef<Path>) -> Result<ImpTrajectory> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let raw = read_file(&manifest_path)?;
    let value: serde_json::Value = serde_json::from_slice(&raw)
        .map_err(|e| FormatError::Malformed(format!("{}: {e}", manifest_path.display())))?;
    let version = value.get("format_version").and_then(serde_json::Value::as_u64);
    match version {
        Some(v) if v == u64::from(FORMAT_VERSION) => {}
        Some(v) => {
            return Err(FormatError::Version {
                found: u32::try_from(v).unwrap_or(u32::MAX),
                supported: FORMAT_VERSION,
            }
            .into())
        }
        None => return Err(FormatError::Malformed(format!("{}: missing format_version", manifest_path.display())).into()),
    }
    let file: ManifestFile = serde_json::from_slice(&raw)
        .map_err(|e| FormatError::Malformed(format!("{}: {e}", manifest_path.display())))?;
    if file.rounds.len() != file.round_count {
        return Err(FormatError::Shape {
            context: "manifest".into(),
            detail: format!("round_count {} but {} round entries", file.round_count, file.rounds.len()),
        }
        .into());
    }
    let mut rounds: Vec<RoundRecord> = Vec::with_capacity(file.round_count);
    for (n, meta) in file.rounds.iter().enumerate() {
        if meta.index != n {
            return Err(FormatError::Malformed(format!("manifest round entry {n} has index {}", meta.index)).into());
        }
        let path = dir.join(round_file_name(n));
        let bytes = read_file(&path)?;
        let (mask, weights) = decode_round(&path, n, &file.manifest, &bytes)?;
        if let Some(prev) = rounds.last() {
            if let Some((g, i)) = first_restored(&mask, &prev.mask) {
                return Err(FormatError::NonMonotoneMask {
                    round: n,
                    group: file.manifest.groups[g].name.clone(),
                    index: i,
                }
                .into());
            }
        }
        rounds.push(RoundRecord {
            round_index: n,
            mask,
            weights,
            density: meta.density,
            x_n: meta.x,
            eval_error: meta.eval_error,
        });
    }
    Ok(ImpTrajectory {
        manifest: file.manifest,
        rounds,
    })
}

fn first_restored(now: &MaskState, before: &MaskState) -> Option<(usize, usize)> {
    now.bits.iter().zip(&before.bits).enumerate().find_map(|(g, (a, b))| {
        a.iter()
            .zip(b)
            .position(|(&kept_now, &kept_before)| kept_now && !kept_before)
            .map(|i| (g, i))
    })
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => FormatError::Malformed(format!("{}: {other:?}", path.display())).into(),
    }
}

fn open_csv(path: &Path, expected: &[&str]) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file);
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.iter().ne(expected.iter().copied()) {
        return Err(FormatError::Header {
            path: path.to_path_buf(),
            expected: expected.join(","),
            found: headers.iter().collect::<Vec<_>>().join(","),
        }
        .into());
    }
    Ok(reader)
}

fn parse_field<T: std::str::FromStr>(path: &Path, line: u64, name: &str, raw: &str) -> Result<T> {
    raw.parse().map_err(|_| {
        FormatError::Malformed(format!("{}:{line}: cannot parse {name} from `{raw}`", path.display())).into()
    })
}

fn record_line(record: &csv::StringRecord) -> u64 {
    record.position().map_or(0, csv::Position::line)
}

/// Reads a per-round, per-group summary table and builds observables from it.
///
/// Group order follows first appearance. With a sidecar (`round,x`, one row per
/// round after the first), `x` comes from it; otherwise it is derived from the
/// kept counts.
pub fn read_summary_csv(path: impl AsRef<Path>, sidecar: Option<&Path>) -> Result<FlowObservables> {
    let path = path.as_ref();
    let mut reader = open_csv(path, &SUMMARY_HEADER)?;
    let mut groups: Vec<String> = Vec::new();
    let mut totals: Vec<usize> = Vec::new();
    // (round, group index) -> (magnitude, count)
    let mut cells: std::collections::BTreeMap<(usize, usize), (f64, usize)> = Default::default();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record_line(&record);
        let round: usize = parse_field(path, line, "round", &record[0])?;
        let name = record[1].to_owned();
        let magnitude: f64 = parse_field(path, line, "masked_magnitude", &record[2])?;
        let count: usize = parse_field(path, line, "unpruned_count", &record[3])?;
        let total: usize = parse_field(path, line, "total_count", &record[4])?;
        if !(magnitude.is_finite() && magnitude >= 0.0) || count > total {
            return Err(FormatError::Malformed(format!("{}:{line}: inconsistent values", path.display())).into());
        }
        let g = match groups.iter().position(|x| *x == name) {
            Some(g) => g,
            None => {
                groups.push(name.clone());
                totals.push(total);
                groups.len() - 1
            }
        };
        if totals[g] != total {
            return Err(FormatError::Malformed(format!(
                "{}:{line}: total_count of `{name}` changed from {} to {total}",
                path.display(),
                totals[g]
            ))
            .into());
        }
        if cells.insert((round, g), (magnitude, count)).is_some() {
            return Err(FormatError::Malformed(format!("{}:{line}: duplicate row for round {round}, group `{name}`", path.display())).into());
        }
    }
    let rounds: std::collections::BTreeSet<usize> = cells.keys().map(|k| k.0).collect();
    let (first, last) = match (rounds.first(), rounds.last()) {
        (Some(&a), Some(&b)) => (a, b),
        _ => return Err(FormatError::Malformed(format!("{}: no data rows", path.display())).into()),
    };
    let count = last - first + 1;
    let mut magnitude = vec![vec![0.0; count]; groups.len()];
    let mut kept = vec![vec![0usize; count]; groups.len()];
    for n in 0..count {
        for (g, name) in groups.iter().enumerate() {
            let (m, k) = cells.get(&(first + n, g)).ok_or_else(|| FormatError::MissingCell {
                round: first + n,
                group: name.clone(),
            })?;
            magnitude[g][n] = *m;
            kept[g][n] = *k;
        }
    }
    let x = match sidecar {
        Some(p) => Some(read_x_sidecar(p, first + 1, last)?),
        None => None,
    };
    FlowObservables::from_sums(groups, &magnitude, &kept, totals.iter().sum(), x)
}

/// Reads `round,x` rows for exactly the rounds `first..=last`.
fn read_x_sidecar(path: &Path, first: usize, last: usize) -> Result<Vec<f64>> {
    let mut reader = open_csv(path, &SIDECAR_HEADER)?;
    let mut values = std::collections::BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record_line(&record);
        let round: usize = parse_field(path, line, "round", &record[0])?;
        let x: f64 = parse_field(path, line, "x", &record[1])?;
        if values.insert(round, x).is_some() {
            return Err(FormatError::Malformed(format!("{}:{line}: duplicate round {round}", path.display())).into());
        }
    }
    (first..=last)
        .map(|n| {
            values.get(&n).copied().ok_or_else(|| {
                FormatError::Malformed(format!("{}: no x for round {n}", path.display())).into()
            })
        })
        .collect()
}

/// The summary table of a trajectory, in the format [`read_summary_csv`] reads.
pub fn write_summary_csv(traj: &ImpTrajectory, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(SUMMARY_HEADER).map_err(|e| csv_error(path, e))?;
    for record in &traj.rounds {
        for (g, entry) in traj.manifest.groups.iter().enumerate() {
            let bits = &record.mask.bits[g];
            let magnitude: f64 = bits
                .iter()
                .zip(record.weights[g].data())
                .filter(|(&b, _)| b)
                .map(|(_, v)| v.abs())
                .sum();
            w.write_record([
                record.round_index.to_string(),
                entry.name.clone(),
                format!("{magnitude:.16e}"),
                record.mask.kept_in(g).to_string(),
                bits.len().to_string(),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a `density,error` curve.
pub fn read_curve_csv(path: impl AsRef<Path>) -> Result<Vec<(f64, f64)>> {
    let path = path.as_ref();
    let mut reader = open_csv(path, &CURVE_HEADER)?;
    let mut points = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record_line(&record);
        points.push((
            parse_field(path, line, "density", &record[0])?,
            parse_field(path, line, "error", &record[1])?,
        ));
    }
    Ok(points)
}

fn write_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `round,density,error` for every round of a trajectory.
pub fn write_curve_csv(traj: &ImpTrajectory, path: impl AsRef<Path>) -> Result<()> {
    write_rows(
        path.as_ref(),
        &["round", "density", "error"],
        traj.rounds.iter().map(|r| {
            vec![
                r.round_index.to_string(),
                format!("{:.16e}", r.density),
                format!("{:.16e}", r.eval_error),
            ]
        }),
    )
}

/// `round,density,M_<a>,M_<b>` projection table.
pub fn write_projection_csv(points: &[ProjectionPoint], a: &str, b: &str, path: impl AsRef<Path>) -> Result<()> {
    let (ha, hb) = (format!("M_{a}"), format!("M_{b}"));
    write_rows(
        path.as_ref(),
        &["round", "density", &ha, &hb],
        points.iter().map(|p| {
            vec![
                p.round.to_string(),
                format!("{:.16e}", p.density),
                format!("{:.16e}", p.a),
                format!("{:.16e}", p.b),
            ]
        }),
    )
}

/// Any report this crate writes, tagged by `kind`.
#[derive(Debug, Clone, PartialEq, SerializeDerive, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReportDocument {
    Eigen(EigenReport),
    Flow(FlowReport),
    Comparison(ComparisonVerdict),
    Fit(FitResult),
}

impl ReportDocument {
    /// The magnitude-based eigen report, for documents that carry one.
    pub fn eigen(&self) -> Option<&EigenReport> {
        match self {
            ReportDocument::Eigen(r) => Some(r),
            ReportDocument::Flow(f) => Some(&f.magnitude),
            _ => None,
        }
    }
}

pub fn report_to_bytes(report: &ReportDocument) -> Result<Vec<u8>> {
    to_json_bytes(report)
}

pub fn report_from_bytes(bytes: &[u8]) -> Result<ReportDocument> {
    serde_json::from_slice(bytes).map_err(|e| FormatError::Malformed(format!("report: {e}")).into())
}

pub fn write_report(report: &ReportDocument, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&report_to_bytes(report)?).map_err(|e| Error::io(path, e))
}

pub fn read_report(path: impl AsRef<Path>) -> Result<ReportDocument> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    report_from_bytes(&bytes).map_err(|e| match e {
        Error::Format(FormatError::Malformed(m)) => FormatError::Malformed(format!("{}: {m}", path.display())).into(),
        other => other,
    })
}

/// Paths of all files making up the trajectory in `dir`.
pub fn trajectory_files(dir: impl AsRef<Path>, rounds: usize) -> Vec<PathBuf> {
    let dir = dir.as_ref();
    std::iter::once(dir.join(MANIFEST_FILE))
        .chain((0..rounds).map(|n| dir.join(round_file_name(n))))
        .collect()
}
