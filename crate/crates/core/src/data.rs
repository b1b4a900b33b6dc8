//! Dataset ingestion and generation: image folders indexed by a CSV file,
//! a seeded synthetic lesion-style generator for desk-scale experiments,
//! and stratified split utilities. Only 8-bit PGM (P5) and PPM (P6) images
//! are decoded; pixels always live in [0, 1].

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Val,
    Test,
    Full,
}

impl SplitTag {
    pub fn name(&self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
            SplitTag::Full => "full",
        }
    }
}

/// Immutable labeled image set with pixels in [0, 1].
#[derive(Debug, Clone)]
pub struct Dataset {
    /// `[n, channels, height, width]`
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub split_tag: SplitTag,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.images.shape()[3]
    }

    /// Subset by example indices, preserving order.
    pub fn select(&self, indices: &[usize], tag: SplitTag) -> Dataset {
        let stride = self.images.example_stride();
        let mut data = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.images.example(i));
            labels.push(self.labels[i]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        Dataset {
            images: Tensor::from_parts(shape, data),
            labels,
            class_names: self.class_names.clone(),
            split_tag: tag,
        }
    }

    /// FNV-1a digest over pixels and labels; used to assert that runs share
    /// identical splits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x100_0000_01b3);
        };
        for &v in self.images.data() {
            // the cast widens under the f32 feature and is a no-op otherwise
            #[allow(clippy::unnecessary_cast)]
            for b in (v as f64).to_le_bytes() {
                eat(b);
            }
        }
        for &l in &self.labels {
            for b in (l as u64).to_le_bytes() {
                eat(b);
            }
        }
        h
    }
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

/// Noise amplitude added to every synthetic pixel.
pub const SYNTH_NOISE: Real = 0.05;

/// Render one elliptical blob: intensity exp(-d^2/r^2) around the center,
/// where the x-axis of the ellipse is stretched by the eccentricity factor.
pub fn render_blob(
    size: usize,
    center: (Real, Real),
    radius: Real,
    eccentricity: Real,
    noise_amp: Real,
    rng: &mut Rng,
) -> Vec<Real> {
    let mut out = Vec::with_capacity(size * size);
    for py in 0..size {
        for px in 0..size {
            let dx = (px as Real - center.0) / eccentricity;
            let dy = py as Real - center.1;
            let d2 = dx * dx + dy * dy;
            let mut v = (-d2 / (radius * radius)).exp();
            if noise_amp > 0.0 {
                v += rng.uniform(-noise_amp, noise_amp);
            }
            out.push(v.clamp(0.0, 1.0));
        }
    }
    out
}

/// Seeded synthetic dataset: class `c` is an elliptical blob of radius
/// `(0.15 + 0.08 c) * size` and eccentricity `1 + 0.3 c`, with intensity
/// falloff `exp(-d^2/r^2)`, additive uniform noise of amplitude 0.05 and
/// center jitter of +-0.1 * size. Fully determined by its arguments.
pub fn synth(classes: usize, per_class: usize, size: usize, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Contract(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    let root = Rng::new(seed);
    let n = classes * per_class;
    let mut data = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n);
    let mid = (size as Real - 1.0) / 2.0;
    for class in 0..classes {
        let radius = (0.15 + 0.08 * class as Real) * size as Real;
        let ecc = 1.0 + 0.3 * class as Real;
        for idx in 0..per_class {
            let mut rng = root.fork(&[class as u64, idx as u64]);
            let jitter = 0.1 * size as Real;
            let cx = mid + rng.uniform(-jitter, jitter);
            let cy = mid + rng.uniform(-jitter, jitter);
            data.extend(render_blob(
                size,
                (cx, cy),
                radius,
                ecc,
                SYNTH_NOISE,
                &mut rng,
            ));
            labels.push(class);
        }
    }
    Ok(Dataset {
        images: Tensor::from_parts(vec![n, 1, size, size], data),
        labels,
        class_names: (0..classes).map(|c| format!("class{c}")).collect(),
        split_tag: SplitTag::Full,
    })
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

/// Seeded stratified split into train/val/test. Fractions must be positive
/// and sum to at most 1; leftovers (from rounding or a sum below 1) go to
/// the training split.
pub fn split(
    dataset: &Dataset,
    fractions: (Real, Real, Real),
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    let (ft, fv, fe) = fractions;
    if ft <= 0.0 || fv <= 0.0 || fe <= 0.0 || ft + fv + fe > 1.0 + 1e-9 {
        return Err(Error::Contract(format!(
            "bad split fractions ({ft}, {fv}, {fe})"
        )));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in dataset.labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let root = Rng::new(seed);
    let mut tr = Vec::new();
    let mut va = Vec::new();
    let mut te = Vec::new();
    for (&class, members) in &by_class {
        let n = members.len();
        if n < 3 {
            return Err(Error::Contract(format!(
                "class {class} has only {n} examples, cannot produce 3 splits"
            )));
        }
        let nv = ((n as Real) * fv).floor() as usize;
        let ne = ((n as Real) * fe).floor() as usize;
        let nt = n - nv - ne;
        let mut rng = root.fork(&[class as u64]);
        let order = rng.permutation(n);
        for (pos, &ord) in order.iter().enumerate() {
            let idx = members[ord];
            if pos < nt {
                tr.push(idx);
            } else if pos < nt + nv {
                va.push(idx);
            } else {
                te.push(idx);
            }
        }
    }
    tr.sort_unstable();
    va.sort_unstable();
    te.sort_unstable();
    Ok((
        dataset.select(&tr, SplitTag::Train),
        dataset.select(&va, SplitTag::Val),
        dataset.select(&te, SplitTag::Test),
    ))
}

// ---------------------------------------------------------------------------
// PGM / PPM codecs and the folder container format
// ---------------------------------------------------------------------------

fn read_netpbm(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut raw = Vec::new();
    std::fs::File::open(path)
        .map_err(|_| Error::MissingFile(path.to_path_buf()))?
        .read_to_end(&mut raw)
        .map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Decode {
        path: path.to_path_buf(),
        message: m.to_string(),
    };
    if raw.len() < 2 {
        return Err(bad("file too short"));
    }
    let channels = match &raw[0..2] {
        b"P5" => 1,
        b"P6" => 3,
        _ => return Err(bad("not a P5/P6 netpbm file")),
    };
    // Header: magic, width, height, maxval as whitespace-separated tokens;
    // '#' starts a comment through end of line.
    let mut pos = 2;
    let mut fields = Vec::with_capacity(3);
    while fields.len() < 3 {
        while pos < raw.len() && (raw[pos].is_ascii_whitespace() || raw[pos] == b'#') {
            if raw[pos] == b'#' {
                while pos < raw.len() && raw[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < raw.len() && raw[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("malformed header"));
        }
        let text = std::str::from_utf8(&raw[start..pos]).map_err(|_| bad("malformed header"))?;
        fields.push(text.parse::<usize>().map_err(|_| bad("malformed header"))?);
    }
    let (width, height, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(bad("only 8-bit images supported"));
    }
    pos += 1; // single whitespace after maxval
    let need = width * height * channels;
    if raw.len() < pos + need {
        return Err(bad("pixel payload shorter than header promises"));
    }
    Ok((width, height, channels, raw[pos..pos + need].to_vec()))
}

fn write_netpbm(
    path: &Path,
    width: usize,
    height: usize,
    channels: usize,
    pix: &[u8],
) -> Result<()> {
    let magic = match channels {
        1 => "P5",
        3 => "P6",
        _ => {
            return Err(Error::Contract(format!(
                "netpbm supports 1 or 3 channels, got {channels}"
            )))
        }
    };
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pix);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Write one dataset image as PGM/PPM, quantizing [0,1] to 8 bits.
pub fn save_image(dataset: &Dataset, index: usize, path: &Path) -> Result<()> {
    let (c, h, w) = (dataset.channels(), dataset.height(), dataset.width());
    let img = dataset.images.example(index);
    let mut pix = Vec::with_capacity(c * h * w);
    // interleave channels for PPM; PGM is a single plane
    for row in 0..h {
        for col in 0..w {
            for ch in 0..c {
                let v = img[ch * h * w + row * w + col];
                pix.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    write_netpbm(path, w, h, c, &pix)
}

/// Export a dataset as a folder container: `index.csv` (`filename,class`)
/// plus one image file per example.
pub fn save_folder(dataset: &Dataset, root: &Path) -> Result<()> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let ext = if dataset.channels() == 1 {
        "pgm"
    } else {
        "ppm"
    };
    let mut index = String::from("filename,class\n");
    for i in 0..dataset.len() {
        let name = format!("{i:05}.{ext}");
        save_image(dataset, i, &root.join(&name))?;
        index.push_str(&format!(
            "{name},{}\n",
            dataset.class_names[dataset.labels[i]]
        ));
    }
    let index_path = root.join("index.csv");
    std::fs::write(&index_path, index).map_err(|e| Error::io(&index_path, e))
}

/// Load a folder container. Class names come from the index, sorted
/// lexicographically to fix label order; `expected_classes` (when given)
/// rejects entries outside the known set. All images must already match
/// the first image's dimensions (no resampling is implemented).
pub fn load_folder(
    root: &Path,
    index_file: &Path,
    expected_classes: Option<&[String]>,
) -> Result<Dataset> {
    let text = std::fs::read_to_string(index_file)
        .map_err(|_| Error::MissingFile(index_file.to_path_buf()))?;
    let mut rows: Vec<(String, String)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 {
            if line.trim() != "filename,class" {
                return Err(Error::Config {
                    line: Some(1),
                    message: format!("index header must be 'filename,class', got '{line}'"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let Some((file, class)) = line.split_once(',') else {
            return Err(Error::Config {
                line: Some(lineno + 1),
                message: format!("malformed index row '{line}'"),
            });
        };
        rows.push((file.trim().to_string(), class.trim().to_string()));
    }

    let mut class_names: Vec<String> = match expected_classes {
        Some(list) => list.to_vec(),
        None => {
            let mut set: Vec<String> = rows.iter().map(|(_, c)| c.clone()).collect();
            set.sort();
            set.dedup();
            set
        }
    };
    class_names.sort();

    let mut images: Vec<Real> = Vec::new();
    let mut labels = Vec::with_capacity(rows.len());
    let mut dims: Option<(usize, usize, usize)> = None;
    for (file, class) in &rows {
        let label =
            class_names
                .iter()
                .position(|c| c == class)
                .ok_or_else(|| Error::UnknownClass {
                    file: file.clone(),
                    class: class.clone(),
                })?;
        let path: PathBuf = root.join(file);
        let (w, h, c, pix) = read_netpbm(&path)?;
        match dims {
            None => dims = Some((c, h, w)),
            Some(d) => {
                if d != (c, h, w) {
                    return Err(Error::Decode {
                        path,
                        message: format!(
                            "image is {c}x{h}x{w}, dataset is {}x{}x{}",
                            d.0, d.1, d.2
                        ),
                    });
                }
            }
        }
        // de-interleave into channel planes, scaling to [0,1]
        for ch in 0..c {
            for row in 0..h {
                for col in 0..w {
                    let v = pix[(row * w + col) * c + ch];
                    images.push(v as Real / 255.0);
                }
            }
        }
        labels.push(label);
    }
    let (c, h, w) = dims.ok_or_else(|| Error::Contract("index lists no images".into()))?;
    Ok(Dataset {
        images: Tensor::from_parts(vec![labels.len(), c, h, w], images),
        labels,
        class_names,
        split_tag: SplitTag::Full,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_is_deterministic() {
        let a = synth(3, 5, 16, 9).unwrap();
        let b = synth(3, 5, 16, 9).unwrap();
        assert_eq!(a.images.data(), b.images.data());
        assert_eq!(a.labels, b.labels);
        let c = synth(3, 5, 16, 10).unwrap();
        assert_ne!(a.images.data(), c.images.data());
    }

    #[test]
    fn synth_pixels_in_unit_range() {
        let d = synth(4, 3, 12, 1).unwrap();
        assert!(d.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(d.len(), 12);
        assert_eq!(d.images.shape(), &[12, 1, 12, 12]);
    }

    #[test]
    fn noiseless_centered_blob_peaks_at_center() {
        let size = 17;
        let mid = (size as Real - 1.0) / 2.0;
        let mut rng = Rng::new(0);
        let img = render_blob(size, (mid, mid), 3.0, 1.0, 0.0, &mut rng);
        let center = size / 2 * size + size / 2;
        let max = img.iter().cloned().fold(0.0, Real::max);
        assert_eq!(img[center], max);
    }

    #[test]
    fn split_is_stratified_and_exact_when_divisible() {
        let d = synth(2, 100, 8, 3).unwrap();
        let (tr, va, te) = split(&d, (0.8, 0.1, 0.1), 5).unwrap();
        assert_eq!(tr.len(), 160);
        assert_eq!(va.len(), 20);
        assert_eq!(te.len(), 20);
        for class in 0..2 {
            assert_eq!(tr.labels.iter().filter(|&&l| l == class).count(), 80);
            assert_eq!(va.labels.iter().filter(|&&l| l == class).count(), 10);
            assert_eq!(te.labels.iter().filter(|&&l| l == class).count(), 10);
        }
    }

    #[test]
    fn split_same_seed_same_membership() {
        let d = synth(3, 20, 8, 3).unwrap();
        let (a, _, _) = split(&d, (0.7, 0.15, 0.15), 11).unwrap();
        let (b, _, _) = split(&d, (0.7, 0.15, 0.15), 11).unwrap();
        assert_eq!(a.checksum(), b.checksum());
    }

    #[test]
    fn splits_are_disjoint_and_cover() {
        let d = synth(3, 21, 8, 4).unwrap();
        let (tr, va, te) = split(&d, (0.6, 0.2, 0.2), 7).unwrap();
        assert_eq!(tr.len() + va.len() + te.len(), d.len());
        // Pixel multiset check via per-example signatures
        let sig = |ds: &Dataset| {
            let mut sigs: Vec<u64> = (0..ds.len())
                .map(|i| {
                    ds.images.example(i).iter().fold(0u64, |h, &v| {
                        #[allow(clippy::unnecessary_cast)]
                        h.wrapping_mul(31).wrapping_add((v as f64).to_bits())
                    })
                })
                .collect();
            sigs.sort_unstable();
            sigs
        };
        let mut all = sig(&tr);
        all.extend(sig(&va));
        all.extend(sig(&te));
        all.sort_unstable();
        assert_eq!(all, sig(&d));
    }

    #[test]
    fn split_rejects_tiny_classes() {
        let d = synth(2, 2, 8, 4).unwrap();
        assert!(matches!(
            split(&d, (0.5, 0.25, 0.25), 1),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn folder_roundtrip_quantized() {
        let dir = std::env::temp_dir().join("advlab_data_test");
        std::fs::remove_dir_all(&dir).ok();
        let d = synth(2, 4, 8, 6).unwrap();
        save_folder(&d, &dir).unwrap();
        let back = load_folder(&dir, &dir.join("index.csv"), None).unwrap();
        assert_eq!(back.len(), d.len());
        assert_eq!(back.labels, d.labels);
        // 8-bit quantization error bound
        for (a, b) in back.images.data().iter().zip(d.images.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-9);
        }
        assert!(back.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn load_folder_error_cases() {
        let dir = std::env::temp_dir().join("advlab_data_err_test");
        std::fs::remove_dir_all(&dir).ok();
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(dir.join("index.csv"), "filename,class\nghost.pgm,a\n").unwrap();
        assert!(matches!(
            load_folder(&dir, &dir.join("index.csv"), None),
            Err(Error::MissingFile(_))
        ));

        std::fs::write(dir.join("bad.pgm"), b"JUNK").unwrap();
        std::fs::write(dir.join("index.csv"), "filename,class\nbad.pgm,a\n").unwrap();
        assert!(matches!(
            load_folder(&dir, &dir.join("index.csv"), None),
            Err(Error::Decode { .. })
        ));

        let d = synth(2, 2, 4, 0).unwrap();
        save_folder(&d, &dir).unwrap();
        let known = vec!["other".to_string()];
        assert!(matches!(
            load_folder(&dir, &dir.join("index.csv"), Some(&known)),
            Err(Error::UnknownClass { .. })
        ));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn class_labels_follow_sorted_name_order() {
        let dir = std::env::temp_dir().join("advlab_data_sort_test");
        std::fs::remove_dir_all(&dir).ok();
        std::fs::create_dir_all(&dir).unwrap();
        write_netpbm(&dir.join("a.pgm"), 2, 2, 1, &[0, 0, 0, 0]).unwrap();
        write_netpbm(&dir.join("b.pgm"), 2, 2, 1, &[255, 255, 255, 255]).unwrap();
        std::fs::write(
            dir.join("index.csv"),
            "filename,class\na.pgm,zebra\nb.pgm,apple\n",
        )
        .unwrap();
        let d = load_folder(&dir, &dir.join("index.csv"), None).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(
            d.class_names,
            vec!["apple".to_string(), "zebra".to_string()]
        );
        assert_eq!(d.labels, vec![1, 0]); // zebra sorts after apple
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn pixel_255_scales_to_one() {
        let dir = std::env::temp_dir().join("advlab_data_scale_test");
        std::fs::remove_dir_all(&dir).ok();
        std::fs::create_dir_all(&dir).unwrap();
        write_netpbm(&dir.join("x.pgm"), 2, 1, 1, &[255, 0]).unwrap();
        std::fs::write(dir.join("index.csv"), "filename,class\nx.pgm,a\n").unwrap();
        let d = load_folder(&dir, &dir.join("index.csv"), None).unwrap();
        assert_eq!(d.images.data()[0], 1.0);
        assert_eq!(d.images.data()[1], 0.0);
        std::fs::remove_dir_all(&dir).ok();
    }
}
