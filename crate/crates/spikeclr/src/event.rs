//! Event data model: streams of DVS-style events, the on-disk formats, and
//! a synthetic moving-shapes generator for desk-scale experiments.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::stream_rng;
use rand::Rng;

/// Sign of the brightness change. Channel 0 of every encoded tensor holds
/// positive events, channel 1 negative ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarity {
    Pos,
    Neg,
}

impl Polarity {
    pub fn from_sign(v: i32) -> Result<Polarity> {
        match v {
            1 => Ok(Polarity::Pos),
            -1 => Ok(Polarity::Neg),
            other => Err(Error::data(format!("polarity must be 1 or -1, got {}", other))),
        }
    }

    pub fn sign(self) -> i32 {
        match self {
            Polarity::Pos => 1,
            Polarity::Neg => -1,
        }
    }

    pub fn channel(self) -> usize {
        match self {
            Polarity::Pos => 0,
            Polarity::Neg => 1,
        }
    }
}

/// One DVS event: timestamp in microseconds, pixel coordinates, polarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub t: u64,
    pub x: u16,
    pub y: u16,
    pub p: Polarity,
}

/// A time-sorted event recording with its sensor size and duration.
#[derive(Debug, Clone, PartialEq)]
pub struct EventStream {
    events: Vec<Event>,
    pub sensor: (u16, u16),
    pub duration_us: u64,
}

impl EventStream {
    /// Builds a stream, sorting events by timestamp (stable, so file order
    /// breaks ties) and validating bounds against sensor and duration.
    pub fn new(mut events: Vec<Event>, sensor: (u16, u16), duration_us: u64) -> Result<EventStream> {
        events.sort_by_key(|e| e.t);
        for e in &events {
            if e.x >= sensor.0 || e.y >= sensor.1 {
                return Err(Error::data(format!(
                    "event at ({}, {}) outside {}x{} sensor",
                    e.x, e.y, sensor.0, sensor.1
                )));
            }
            if e.t >= duration_us {
                return Err(Error::data(format!(
                    "event at t={} beyond stream duration {}",
                    e.t, duration_us
                )));
            }
        }
        Ok(EventStream {
            events,
            sensor,
            duration_us,
        })
    }

    /// As `new`, with duration inferred as max timestamp + 1 (0 if empty).
    pub fn with_inferred_duration(events: Vec<Event>, sensor: (u16, u16)) -> Result<EventStream> {
        let duration = events.iter().map(|e| e.t + 1).max().unwrap_or(0);
        EventStream::new(events, sensor, duration)
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// Labeled collection of streams on a shared sensor.
#[derive(Debug, Clone)]
pub struct LabeledEventDataset {
    pub samples: Vec<(EventStream, usize)>,
    pub num_classes: usize,
    pub name: String,
}

impl LabeledEventDataset {
    pub fn new(samples: Vec<(EventStream, usize)>, num_classes: usize, name: String) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::config("dataset needs at least one class"));
        }
        let sensor = samples.first().map(|(s, _)| s.sensor);
        for (stream, class) in &samples {
            if *class >= num_classes {
                return Err(Error::data(format!(
                    "class id {} outside 0..{}",
                    class, num_classes
                )));
            }
            if Some(stream.sensor) != sensor {
                return Err(Error::data(format!(
                    "mixed sensor sizes: {:?} vs {:?}",
                    stream.sensor,
                    sensor.unwrap()
                )));
            }
        }
        Ok(LabeledEventDataset {
            samples,
            num_classes,
            name,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sensor(&self) -> (u16, u16) {
        self.samples.first().map(|(s, _)| s.sensor).unwrap_or((0, 0))
    }

    /// Sample indices belonging to each class, in dataset order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, (_, class)) in self.samples.iter().enumerate() {
            by_class[*class].push(i);
        }
        by_class
    }
}

/// Reads the canonical line-oriented format: header `EVT1 W H [duration]`,
/// then one `t x y p` line per event. A missing duration field is inferred
/// as max t + 1; a zero-byte file is the empty stream.
pub fn read_canonical(path: &Path) -> Result<EventStream> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::data(format!("{}: {}", path.display(), e)))?;
    let mut lines = text.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return EventStream::new(Vec::new(), (0, 0), 0);
    };
    let head: Vec<&str> = header.split_whitespace().collect();
    if head.len() < 3 || head.len() > 4 || head[0] != "EVT1" {
        return Err(Error::data(format!(
            "{}: line 1: expected header 'EVT1 W H [duration]', got {:?}",
            path.display(),
            header
        )));
    }
    let parse_u = |field: &str, what: &str, line: usize| -> Result<u64> {
        field.parse::<u64>().map_err(|_| {
            Error::data(format!(
                "{}: line {}: bad {} {:?}",
                path.display(),
                line,
                what,
                field
            ))
        })
    };
    let w = parse_u(head[1], "width", 1)? as u16;
    let h = parse_u(head[2], "height", 1)? as u16;
    let declared = if head.len() == 4 {
        Some(parse_u(head[3], "duration", 1)?)
    } else {
        None
    };

    let mut events = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::data(format!(
                "{}: line {}: expected 't x y p', got {:?}",
                path.display(),
                idx + 1,
                line
            )));
        }
        let t = parse_u(fields[0], "timestamp", idx + 1)?;
        let x = parse_u(fields[1], "x", idx + 1)? as u16;
        let y = parse_u(fields[2], "y", idx + 1)? as u16;
        let p = fields[3]
            .parse::<i32>()
            .ok()
            .and_then(|v| Polarity::from_sign(v).ok())
            .ok_or_else(|| {
                Error::data(format!(
                    "{}: line {}: bad polarity {:?}",
                    path.display(),
                    idx + 1,
                    fields[3]
                ))
            })?;
        events.push(Event { t, x, y, p });
    }
    match declared {
        Some(d) => EventStream::new(events, (w, h), d),
        None => EventStream::with_inferred_duration(events, (w, h)),
    }
}

/// Writes the canonical format with an explicit duration field, so a
/// round-trip through `read_canonical` reproduces the stream exactly.
pub fn write_canonical(stream: &EventStream, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!(
        "EVT1 {} {} {}\n",
        stream.sensor.0, stream.sensor.1, stream.duration_us
    ));
    for e in stream.events() {
        out.push_str(&format!("{} {} {} {}\n", e.t, e.x, e.y, e.p.sign()));
    }
    let mut file = fs::File::create(path)
        .map_err(|e| Error::data(format!("{}: {}", path.display(), e)))?;
    file.write_all(out.as_bytes())
        .map_err(|e| Error::data(format!("{}: {}", path.display(), e)))?;
    Ok(())
}

/// Decodes the 40-bit N-MNIST record format on a fixed 34x34 sensor:
/// byte0 = x, byte1 = y, byte2 bit 7 = polarity, remaining 23 bits = t (us).
pub fn read_nmnist_bin(path: &Path) -> Result<EventStream> {
    let bytes = fs::read(path).map_err(|e| Error::data(format!("{}: {}", path.display(), e)))?;
    if bytes.len() % 5 != 0 {
        return Err(Error::data(format!(
            "{}: length {} is not a multiple of the 5-byte record size",
            path.display(),
            bytes.len()
        )));
    }
    let mut events = Vec::with_capacity(bytes.len() / 5);
    for (i, rec) in bytes.chunks_exact(5).enumerate() {
        let x = rec[0] as u16;
        let y = rec[1] as u16;
        let p = if rec[2] & 0x80 != 0 {
            Polarity::Pos
        } else {
            Polarity::Neg
        };
        let t = ((rec[2] & 0x7F) as u64) << 16 | (rec[3] as u64) << 8 | rec[4] as u64;
        if x >= 34 || y >= 34 {
            return Err(Error::data(format!(
                "{}: record {}: coordinate ({}, {}) outside the 34x34 sensor",
                path.display(),
                i,
                x,
                y
            )));
        }
        events.push(Event { t, x, y, p });
    }
    EventStream::with_inferred_duration(events, (34, 34))
}

/// Reads one event file by extension: `.evt` canonical, `.bin` N-MNIST.
pub fn read_event_file(path: &Path) -> Result<EventStream> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("evt") => read_canonical(path),
        Some("bin") => read_nmnist_bin(path),
        other => Err(Error::data(format!(
            "{}: unsupported event file extension {:?}",
            path.display(),
            other
        ))),
    }
}

/// Loads a dataset directory: event files beside a `labels.csv` manifest
/// with `filename,class_id` rows.
pub fn read_dataset_dir(dir: &Path) -> Result<LabeledEventDataset> {
    let manifest = dir.join("labels.csv");
    let text = fs::read_to_string(&manifest)
        .map_err(|e| Error::data(format!("{}: {}", manifest.display(), e)))?;
    let mut samples = Vec::new();
    let mut max_class = 0usize;
    for (idx, line) in text.lines().enumerate() {
        if idx == 0 && line.trim() == "filename,class_id" {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let (name, class) = line.split_once(',').ok_or_else(|| {
            Error::data(format!(
                "{}: line {}: expected 'filename,class_id'",
                manifest.display(),
                idx + 1
            ))
        })?;
        let class: usize = class.trim().parse().map_err(|_| {
            Error::data(format!(
                "{}: line {}: bad class id {:?}",
                manifest.display(),
                idx + 1,
                class
            ))
        })?;
        max_class = max_class.max(class);
        samples.push((read_event_file(&dir.join(name.trim()))?, class));
    }
    let name = dir
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("dataset")
        .to_string();
    LabeledEventDataset::new(samples, max_class + 1, name)
}

/// Writes a dataset as numbered canonical files plus the labels manifest.
/// Refuses a non-empty target directory unless `force` is set.
pub fn write_dataset_dir(ds: &LabeledEventDataset, dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let occupied = fs::read_dir(dir)
            .map_err(|e| Error::data(format!("{}: {}", dir.display(), e)))?
            .next()
            .is_some();
        if occupied && !force {
            return Err(Error::config(format!(
                "output directory {} is not empty (use --force to overwrite)",
                dir.display()
            )));
        }
    } else {
        fs::create_dir_all(dir).map_err(|e| Error::data(format!("{}: {}", dir.display(), e)))?;
    }
    let mut manifest = String::from("filename,class_id\n");
    for (i, (stream, class)) in ds.samples.iter().enumerate() {
        let name = format!("sample_{:05}.evt", i);
        write_canonical(stream, &dir.join(&name))?;
        manifest.push_str(&format!("{},{}\n", name, class));
    }
    fs::write(dir.join("labels.csv"), manifest)
        .map_err(|e| Error::data(format!("{}: {}", dir.display(), e)))?;
    Ok(())
}

const MICRO_STEP_US: u64 = 100;
const SHAPE_COUNT: usize = 10;

/// Pixels occupied by shape `kind` of side `l` at integer offset (ox, oy),
/// clipped to the sensor. Returned sorted for deterministic diffing.
fn shape_occupancy(kind: usize, ox: i64, oy: i64, l: i64, sensor: (u16, u16)) -> Vec<(u16, u16)> {
    let mut pixels = Vec::new();
    let mut put = |x: i64, y: i64| {
        if x >= 0 && y >= 0 && x < sensor.0 as i64 && y < sensor.1 as i64 {
            pixels.push((x as u16, y as u16));
        }
    };
    let mid = l / 2;
    let last = l - 1;
    match kind {
        // horizontal bar
        0 => (0..l).for_each(|i| put(ox + i, oy + mid)),
        // box outline
        1 => (0..l).for_each(|i| {
            put(ox + i, oy);
            put(ox + i, oy + last);
            put(ox, oy + i);
            put(ox + last, oy + i);
        }),
        // plus
        2 => (0..l).for_each(|i| {
            put(ox + i, oy + mid);
            put(ox + mid, oy + i);
        }),
        // diagonal
        3 => (0..l).for_each(|i| put(ox + i, oy + i)),
        // T
        4 => (0..l).for_each(|i| {
            put(ox + i, oy);
            put(ox + mid, oy + i);
        }),
        // L
        5 => (0..l).for_each(|i| {
            put(ox, oy + i);
            put(ox + i, oy + last);
        }),
        // X
        6 => (0..l).for_each(|i| {
            put(ox + i, oy + i);
            put(ox + i, oy + last - i);
        }),
        // filled box
        7 => (0..l).for_each(|i| (0..l).for_each(|j| put(ox + j, oy + i))),
        // U
        8 => (0..l).for_each(|i| {
            put(ox, oy + i);
            put(ox + last, oy + i);
            put(ox + i, oy + last);
        }),
        // H
        9 => (0..l).for_each(|i| {
            put(ox, oy + i);
            put(ox + last, oy + i);
            put(ox + i, oy + mid);
        }),
        _ => unreachable!("shape kind checked by caller"),
    }
    pixels.sort_unstable();
    pixels.dedup();
    pixels
}

/// Triangle-wave fold of `v` into [0, range], reflecting at both ends.
fn reflect(v: f64, range: f64) -> f64 {
    if range <= 0.0 {
        return 0.0;
    }
    let period = 2.0 * range;
    let mut m = v % period;
    if m < 0.0 {
        m += period;
    }
    if m <= range {
        m
    } else {
        period - m
    }
}

/// Renders one translating shape into its event stream by differencing
/// pixel occupancy at fixed micro-steps: + events where pixels turn on,
/// - events where they turn off. Velocity is in pixels per microsecond.
pub fn render_moving_shape(
    kind: usize,
    sensor: (u16, u16),
    duration_us: u64,
    start: (f64, f64),
    velocity: (f64, f64),
) -> Result<EventStream> {
    if kind >= SHAPE_COUNT {
        return Err(Error::config(format!(
            "shape kind {} outside 0..{}",
            kind, SHAPE_COUNT
        )));
    }
    let l = (sensor.0.min(sensor.1) as i64 / 4).max(4);
    let range_x = (sensor.0 as i64 - l) as f64;
    let range_y = (sensor.1 as i64 - l) as f64;
    let mut events = Vec::new();
    let mut prev: Vec<(u16, u16)> = Vec::new();
    let mut t = 0u64;
    while t < duration_us {
        let ox = reflect(start.0 + velocity.0 * t as f64, range_x).round() as i64;
        let oy = reflect(start.1 + velocity.1 * t as f64, range_y).round() as i64;
        let now = shape_occupancy(kind, ox, oy, l, sensor);
        for &(x, y) in &now {
            if prev.binary_search(&(x, y)).is_err() {
                events.push(Event { t, x, y, p: Polarity::Pos });
            }
        }
        for &(x, y) in &prev {
            if now.binary_search(&(x, y)).is_err() {
                events.push(Event { t, x, y, p: Polarity::Neg });
            }
        }
        prev = now;
        t += MICRO_STEP_US;
    }
    EventStream::new(events, sensor, duration_us)
}

/// Synthesizes a labeled dataset of translating shapes, one shape per
/// class, with a per-sample random start position and velocity.
pub fn synth_moving_shapes(
    num_classes: usize,
    samples_per_class: usize,
    sensor: (u16, u16),
    duration_us: u64,
    seed: u64,
) -> Result<LabeledEventDataset> {
    synth_moving_shapes_with_offset(num_classes, 0, samples_per_class, sensor, duration_us, seed)
}

/// Like `synth_moving_shapes`, but class c renders shape kind
/// `class_offset + c`, so two datasets can be built over disjoint shapes.
pub fn synth_moving_shapes_with_offset(
    num_classes: usize,
    class_offset: usize,
    samples_per_class: usize,
    sensor: (u16, u16),
    duration_us: u64,
    seed: u64,
) -> Result<LabeledEventDataset> {
    if !(2..=SHAPE_COUNT).contains(&num_classes) || class_offset + num_classes > SHAPE_COUNT {
        return Err(Error::config(format!(
            "need 2..={} classes fitting below shape kind {} (got {} at offset {})",
            SHAPE_COUNT, SHAPE_COUNT, num_classes, class_offset
        )));
    }
    if sensor.0 < 8 || sensor.1 < 8 {
        return Err(Error::config(format!(
            "sensor must be at least 8x8, got {}x{}",
            sensor.0, sensor.1
        )));
    }
    if duration_us == 0 || samples_per_class == 0 {
        return Err(Error::config(
            "duration and samples_per_class must be positive",
        ));
    }
    let l = (sensor.0.min(sensor.1) as i64 / 4).max(4);
    let mut samples = Vec::with_capacity(num_classes * samples_per_class);
    for class in 0..num_classes {
        let kind = class_offset + class;
        for idx in 0..samples_per_class {
            let mut rng = stream_rng(seed, "synth", &[kind as u64, idx as u64]);
            let start = (
                rng.random::<f64>() * (sensor.0 as i64 - l) as f64,
                rng.random::<f64>() * (sensor.1 as i64 - l) as f64,
            );
            let angle = rng.random::<f64>() * std::f64::consts::TAU;
            // 1 to 3 pixels per millisecond.
            let speed = (1.0 + 2.0 * rng.random::<f64>()) / 1000.0;
            let velocity = (angle.cos() * speed, angle.sin() * speed);
            let stream = render_moving_shape(kind, sensor, duration_us, start, velocity)?;
            samples.push((stream, class));
        }
    }
    let name = if class_offset == 0 {
        format!("synth_c{}_s{}", num_classes, seed)
    } else {
        format!("synth_c{}_o{}_s{}", num_classes, class_offset, seed)
    };
    LabeledEventDataset::new(samples, num_classes, name)
}
