//! RGB-D frames, image sampling, blur scoring, keyframes and pyramids.

use std::path::Path;

use nalgebra::Vector2;

use crate::camera::{parse_trajectory, trajectory_to_text, CameraIntrinsics, Pose};
use crate::error::{Error, Result};
use crate::solver::Real;

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];
const BLUR_KERNEL: usize = 9;

/// Row-major image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

pub type GrayImage = Image<f32>;
pub type ColorImage = Image<[f32; 3]>;

impl<T: Copy> Image<T> {
    pub fn filled(width: usize, height: usize, v: T) -> Self {
        Self {
            width,
            height,
            data: vec![v; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Image<U> {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    fn check_bounds(&self, x: f64, y: f64) -> Result<()> {
        let ok = x >= 0.0
            && y >= 0.0
            && x <= (self.width - 1) as f64
            && y <= (self.height - 1) as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::OutOfBounds {
                x,
                y,
                width: self.width,
                height: self.height,
            })
        }
    }
}

/// Integer corner and fractional offsets for bilinear interpolation at an in-bounds point.
#[inline]
fn bilinear_support(width: usize, height: usize, x: f64, y: f64) -> (usize, usize, f64, f64) {
    let x0 = (x.floor() as usize).min(width.saturating_sub(2));
    let y0 = (y.floor() as usize).min(height.saturating_sub(2));
    (x0, y0, x - x0 as f64, y - y0 as f64)
}

impl GrayImage {
    pub fn sample(&self, x: f64, y: f64) -> Result<f64> {
        self.check_bounds(x, y)?;
        if self.width == 1 || self.height == 1 {
            return Ok(self.get(x.round() as usize, y.round() as usize) as f64);
        }
        let (x0, y0, fx, fy) = bilinear_support(self.width, self.height, x, y);
        let a = self.get(x0, y0) as f64;
        let b = self.get(x0 + 1, y0) as f64;
        let c = self.get(x0, y0 + 1) as f64;
        let d = self.get(x0 + 1, y0 + 1) as f64;
        Ok((a * (1.0 - fx) + b * fx) * (1.0 - fy) + (c * (1.0 - fx) + d * fx) * fy)
    }

    /// Bilinear sample with differentiable coordinates; coordinates are clamped to the image.
    pub fn sample_clamped<T: Real>(&self, x: T, y: T) -> T {
        let xmax = (self.width - 1) as f64;
        let ymax = (self.height - 1) as f64;
        let (xv, yv) = (x.value(), y.value());
        // Clamped coordinates have zero derivative.
        let (x, xv) = if xv < 0.0 {
            (T::cst(0.0), 0.0)
        } else if xv > xmax {
            (T::cst(xmax), xmax)
        } else {
            (x, xv)
        };
        let (y, yv) = if yv < 0.0 {
            (T::cst(0.0), 0.0)
        } else if yv > ymax {
            (T::cst(ymax), ymax)
        } else {
            (y, yv)
        };
        let (x0, y0, _, _) = bilinear_support(self.width, self.height, xv, yv);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let a = self.get(x0, y0) as f64;
        let b = self.get(x0 + 1, y0) as f64;
        let c = self.get(x0, y0 + 1) as f64;
        let d = self.get(x0 + 1, y0 + 1) as f64;
        let top = fx * (b - a) + a;
        let bot = fx * (d - c) + c;
        (bot - top) * fy + top
    }

    /// Forward differences of bilinear samples: `(I(x+1,y) − I(x,y), I(x,y+1) − I(x,y))`.
    pub fn gradient(&self, x: f64, y: f64) -> Result<Vector2<f64>> {
        let i = self.sample(x, y)?;
        let ix = self.sample(x + 1.0, y)?;
        let iy = self.sample(x, y + 1.0)?;
        Ok(Vector2::new(ix - i, iy - i))
    }

    /// [`gradient`](Self::gradient) with differentiable, clamped coordinates.
    pub fn gradient_clamped<T: Real>(&self, x: T, y: T) -> [T; 2] {
        let i = self.sample_clamped(x, y);
        [
            self.sample_clamped(x + 1.0, y) - i,
            self.sample_clamped(x, y + 1.0) - i,
        ]
    }
}

impl ColorImage {
    pub fn sample(&self, x: f64, y: f64) -> Result<[f64; 3]> {
        self.check_bounds(x, y)?;
        if self.width == 1 || self.height == 1 {
            return Ok(self.get(x.round() as usize, y.round() as usize).map(|v| v as f64));
        }
        let (x0, y0, fx, fy) = bilinear_support(self.width, self.height, x, y);
        let w = [
            (1.0 - fx) * (1.0 - fy),
            fx * (1.0 - fy),
            (1.0 - fx) * fy,
            fx * fy,
        ];
        let px = [
            self.get(x0, y0),
            self.get(x0 + 1, y0),
            self.get(x0, y0 + 1),
            self.get(x0 + 1, y0 + 1),
        ];
        let mut out = [0.0; 3];
        for (wi, p) in w.iter().zip(px.iter()) {
            for c in 0..3 {
                out[c] += wi * p[c] as f64;
            }
        }
        Ok(out)
    }
}

/// Depth map in meters; 0 marks a missing sample.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthImage(pub Image<f32>);

impl DepthImage {
    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let d = self.0.get(x, y);
        (d > 0.0).then_some(d as f64)
    }

    /// Bilinear sample; `Ok(None)` when any of the four supports is missing.
    pub fn sample(&self, x: f64, y: f64) -> Result<Option<f64>> {
        self.0.check_bounds(x, y)?;
        if self.width() == 1 || self.height() == 1 {
            return Ok(self.get(x.round() as usize, y.round() as usize));
        }
        let (x0, y0, fx, fy) = bilinear_support(self.width(), self.height(), x, y);
        let support = [
            (x0, y0, (1.0 - fx) * (1.0 - fy)),
            (x0 + 1, y0, fx * (1.0 - fy)),
            (x0, y0 + 1, (1.0 - fx) * fy),
            (x0 + 1, y0 + 1, fx * fy),
        ];
        let mut acc = 0.0;
        for (sx, sy, w) in support {
            // Zero-weight supports do not contribute, so holes there are harmless.
            if w == 0.0 {
                continue;
            }
            match self.get(sx, sy) {
                Some(d) => acc += w * d,
                None => return Ok(None),
            }
        }
        Ok(Some(acc))
    }
}

/// Rec. 601 luma; exact for gray colors.
pub fn intensity_from_rgb(c: [f64; 3]) -> f64 {
    if c[0] == c[1] && c[1] == c[2] {
        return c[0];
    }
    LUMA[0] * c[0] + LUMA[1] * c[1] + LUMA[2] * c[2]
}

pub fn intensity_image(color: &ColorImage) -> GrayImage {
    color.map(|c| intensity_from_rgb(c.map(|v| v as f64)) as f32)
}

#[derive(Clone, Debug)]
pub struct Frame {
    pub index: usize,
    pub color: ColorImage,
    pub intensity: GrayImage,
    pub depth: DepthImage,
    /// Camera-to-world.
    pub pose: Pose,
    /// 0 = sharp, 1 = maximally blurry.
    pub blur: f64,
}

impl Frame {
    pub fn new(index: usize, color: ColorImage, depth: DepthImage, pose: Pose) -> Result<Self> {
        if color.width != depth.width() || color.height != depth.height() {
            return Err(Error::InvalidInput(format!(
                "frame {index}: color {}x{} and depth {}x{} are not registered",
                color.width,
                color.height,
                depth.width(),
                depth.height()
            )));
        }
        let intensity = intensity_image(&color);
        let blur = blur_score(&intensity)?;
        Ok(Self {
            index,
            color,
            intensity,
            depth,
            pose,
            blur,
        })
    }

    pub fn width(&self) -> usize {
        self.color.width
    }

    pub fn height(&self) -> usize {
        self.color.height
    }
}

fn box_blur(img: &GrayImage, horizontal: bool) -> Vec<f64> {
    let (w, h) = (img.width as isize, img.height as isize);
    let r = (BLUR_KERNEL / 2) as isize;
    let mut out = vec![0.0; img.data.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for o in -r..=r {
                let (sx, sy) = if horizontal {
                    ((x + o).clamp(0, w - 1), y)
                } else {
                    (x, (y + o).clamp(0, h - 1))
                };
                acc += img.get(sx as usize, sy as usize) as f64;
            }
            out[(y * w + x) as usize] = acc / BLUR_KERNEL as f64;
        }
    }
    out
}

/// No-reference blur metric comparing neighbor differences before and after a 9-tap re-blur.
pub fn blur_score(img: &GrayImage) -> Result<f64> {
    if img.width < 3 || img.height < 3 {
        return Err(Error::InvalidInput(format!(
            "blur score needs at least 3x3 pixels, got {}x{}",
            img.width, img.height
        )));
    }
    let (w, h) = (img.width, img.height);
    let mut best: Option<f64> = None;
    for horizontal in [false, true] {
        let blurred = box_blur(img, horizontal);
        let (mut s_f, mut s_v) = (0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                let (px, py) = if horizontal {
                    if x == 0 {
                        continue;
                    }
                    (x - 1, y)
                } else {
                    if y == 0 {
                        continue;
                    }
                    (x, y - 1)
                };
                let d_f = (img.get(x, y) as f64 - img.get(px, py) as f64).abs();
                let d_b = (blurred[y * w + x] - blurred[py * w + px]).abs();
                s_f += d_f;
                s_v += (d_f - d_b).max(0.0);
            }
        }
        if s_f > 1e-12 {
            let b = ((s_f - s_v) / s_f).clamp(0.0, 1.0);
            best = Some(best.map_or(b, |m: f64| m.max(b)));
        }
    }
    Ok(best.unwrap_or(1.0))
}

/// Least blurred frame per window of `t_kf` consecutive frames; ties go to the lower index.
pub fn select_keyframes(frames: &[Frame], t_kf: usize) -> Result<Vec<&Frame>> {
    let blurs: Vec<(usize, f64)> = frames.iter().map(|f| (f.index, f.blur)).collect();
    Ok(select_keyframe_positions(&blurs, t_kf)?
        .into_iter()
        .map(|i| &frames[i])
        .collect())
}

/// Positions selected from `(frame_index, blur)` pairs; see [`select_keyframes`].
pub fn select_keyframe_positions(blurs: &[(usize, f64)], t_kf: usize) -> Result<Vec<usize>> {
    if t_kf == 0 {
        return Err(Error::InvalidInput("t_KF must be at least 1".into()));
    }
    let mut out = Vec::new();
    for (w, chunk) in blurs.chunks(t_kf).enumerate() {
        let mut best = 0;
        for (i, c) in chunk.iter().enumerate() {
            let b = &chunk[best];
            if c.1 < b.1 || (c.1 == b.1 && c.0 < b.0) {
                best = i;
            }
        }
        out.push(w * t_kf + best);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct PyramidLevel {
    pub color: ColorImage,
    pub intensity: GrayImage,
    pub depth: DepthImage,
    pub intrinsics: CameraIntrinsics,
}

#[derive(Clone, Debug)]
pub struct FramePyramid {
    pub levels: Vec<PyramidLevel>,
}

fn check_divisible(w: usize, h: usize, levels: usize) -> Result<()> {
    if levels == 0 {
        return Err(Error::InvalidInput("pyramid needs at least one level".into()));
    }
    let s = 1usize << (levels - 1);
    if w % s != 0 || h % s != 0 {
        return Err(Error::InvalidInput(format!(
            "image size {w}x{h} not divisible by {s}"
        )));
    }
    Ok(())
}

pub fn downsample_gray(img: &GrayImage) -> GrayImage {
    Image::from_fn(img.width / 2, img.height / 2, |x, y| {
        let s = img.get(2 * x, 2 * y) as f64
            + img.get(2 * x + 1, 2 * y) as f64
            + img.get(2 * x, 2 * y + 1) as f64
            + img.get(2 * x + 1, 2 * y + 1) as f64;
        (s * 0.25) as f32
    })
}

pub fn downsample_color(img: &ColorImage) -> ColorImage {
    Image::from_fn(img.width / 2, img.height / 2, |x, y| {
        let mut out = [0.0f32; 3];
        for c in 0..3 {
            let s = img.get(2 * x, 2 * y)[c] as f64
                + img.get(2 * x + 1, 2 * y)[c] as f64
                + img.get(2 * x, 2 * y + 1)[c] as f64
                + img.get(2 * x + 1, 2 * y + 1)[c] as f64;
            out[c] = (s * 0.25) as f32;
        }
        out
    })
}

/// 2x2 median of valid samples (mean of the middle pair for an even count); 0 if none.
pub fn downsample_depth(img: &DepthImage) -> DepthImage {
    let src = &img.0;
    DepthImage(Image::from_fn(src.width / 2, src.height / 2, |x, y| {
        let mut v: Vec<f32> = [
            src.get(2 * x, 2 * y),
            src.get(2 * x + 1, 2 * y),
            src.get(2 * x, 2 * y + 1),
            src.get(2 * x + 1, 2 * y + 1),
        ]
        .into_iter()
        .filter(|d| *d > 0.0)
        .collect();
        v.sort_by(|a, b| a.total_cmp(b));
        match v.len() {
            0 => 0.0,
            n if n % 2 == 1 => v[n / 2],
            n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
        }
    }))
}

pub fn build_pyramid(frame: &Frame, intr: &CameraIntrinsics, levels: usize) -> Result<FramePyramid> {
    check_divisible(frame.width(), frame.height(), levels)?;
    let mut out = vec![PyramidLevel {
        color: frame.color.clone(),
        intensity: frame.intensity.clone(),
        depth: frame.depth.clone(),
        intrinsics: *intr,
    }];
    for l in 1..levels {
        let prev = &out[l - 1];
        out.push(PyramidLevel {
            color: downsample_color(&prev.color),
            intensity: downsample_gray(&prev.intensity),
            depth: downsample_depth(&prev.depth),
            intrinsics: intr.for_level(l as u32)?,
        });
    }
    Ok(FramePyramid { levels: out })
}

/// Frames plus shared intrinsics, as stored in a dataset directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub intrinsics: CameraIntrinsics,
    pub frames: Vec<Frame>,
}

fn frame_file(dir: &Path, sub: &str, index: usize) -> std::path::PathBuf {
    dir.join(sub).join(format!("{index:06}.png"))
}

fn image_err(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    }
}

/// Reads `color/%06d.png`, `depth/%06d.png` (16-bit millimeters), `trajectory.txt`, `intrinsics.txt`.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let intrinsics = CameraIntrinsics::read(&dir.join("intrinsics.txt"))?;
    let traj_path = dir.join("trajectory.txt");
    let text = std::fs::read_to_string(&traj_path).map_err(|e| Error::io(&traj_path, e))?;
    let poses = parse_trajectory(&text, &traj_path)?;
    for sub in ["color", "depth"] {
        let p = dir.join(sub);
        if !p.is_dir() {
            return Err(Error::Format {
                path: p,
                message: "missing directory".into(),
            });
        }
    }
    let count = |sub: &str| -> Result<usize> {
        let p = dir.join(sub);
        let rd = std::fs::read_dir(&p).map_err(|e| Error::io(&p, e))?;
        Ok(rd
            .filter_map(|e| e.ok())
            .filter(|e| e.path().extension().is_some_and(|x| x == "png"))
            .count())
    };
    let (nc, nd) = (count("color")?, count("depth")?);
    if nc != nd || nc != poses.len() {
        return Err(Error::Format {
            path: dir.to_path_buf(),
            message: format!(
                "{nc} color images, {nd} depth images and {} poses do not match",
                poses.len()
            ),
        });
    }
    let mut frames = Vec::with_capacity(poses.len());
    for (index, pose) in poses {
        let cp = frame_file(dir, "color", index);
        let rgb = image::open(&cp).map_err(|e| image_err(&cp, e))?.into_rgb8();
        let dp = frame_file(dir, "depth", index);
        let dimg = image::open(&dp).map_err(|e| image_err(&dp, e))?;
        let image::DynamicImage::ImageLuma16(d16) = dimg else {
            return Err(Error::Format {
                path: dp,
                message: "depth must be 16-bit single channel".into(),
            });
        };
        let (w, h) = rgb.dimensions();
        if (w as usize, h as usize) != (intrinsics.width, intrinsics.height)
            || d16.dimensions() != (w, h)
        {
            return Err(Error::Format {
                path: cp,
                message: "image size does not match intrinsics".into(),
            });
        }
        let color = Image::from_fn(w as usize, h as usize, |x, y| {
            let p = rgb.get_pixel(x as u32, y as u32).0;
            p.map(|v| v as f32 / 255.0)
        });
        let depth = DepthImage(Image::from_fn(w as usize, h as usize, |x, y| {
            d16.get_pixel(x as u32, y as u32).0[0] as f32 / 1000.0
        }));
        frames.push(Frame::new(index, color, depth, pose)?);
    }
    Ok(Dataset { intrinsics, frames })
}

pub fn quantize_unit(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    for sub in ["color", "depth"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    data.intrinsics.write(&dir.join("intrinsics.txt"))?;
    let traj: Vec<(usize, Pose)> = data.frames.iter().map(|f| (f.index, f.pose)).collect();
    let tp = dir.join("trajectory.txt");
    std::fs::write(&tp, trajectory_to_text(&traj)).map_err(|e| Error::io(&tp, e))?;
    for f in &data.frames {
        let (w, h) = (f.width() as u32, f.height() as u32);
        let rgb = image::RgbImage::from_fn(w, h, |x, y| {
            image::Rgb(
                f.color
                    .get(x as usize, y as usize)
                    .map(|v| quantize_unit(v as f64)),
            )
        });
        let cp = frame_file(dir, "color", f.index);
        rgb.save(&cp).map_err(|e| image_err(&cp, e))?;
        let depth = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_fn(w, h, |x, y| {
            let d = f.depth.0.get(x as usize, y as usize) as f64;
            image::Luma([(d * 1000.0).round().clamp(0.0, 65535.0) as u16])
        });
        let dp = frame_file(dir, "depth", f.index);
        depth.save(&dp).map_err(|e| image_err(&dp, e))?;
    }
    Ok(())
}
