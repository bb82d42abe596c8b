//! Synthetic pelvic phantoms: four superellipsoid organs per patient whose
//! bladder and rectum change filling from fraction to fraction while the
//! prostate shifts rigidly.
//!
//! Organ geometry is expressed in mm relative to the volume centre with axes
//! x (left-right), y (anterior-posterior) and z (inferior-superior). Along y
//! the organs are ordered bladder, prostate, rectum.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::rng::{self, StreamRng};
use crate::volume::{self, Geometry, LabelMap3, OrganLabel, Volume3, VolumeError, N_CLASSES};

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid cohort config: {0}")]
    InvalidConfig(String),
    #[error("{organ} does not fit inside dims {dims:?} with a 2-voxel margin")]
    InfeasibleLayout { organ: OrganLabel, dims: [usize; 3] },
    #[error("cohort layout error: {0}")]
    Layout(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PhantomError>;

/// Scanner/site appearance model.
#[derive(Debug, Clone, PartialEq)]
pub struct InstituteProfile {
    pub name: String,
    pub spacing: [f64; 3],
    /// Default grid for this site.
    pub dims: [usize; 3],
    /// Mean intensity per label code (background first).
    pub tissue_mean: [f64; N_CLASSES],
    /// Within-tissue intensity spread per label code.
    pub tissue_std: [f64; N_CLASSES],
    /// Additive white noise on top of the tissue spread.
    pub noise_std: f64,
    /// Peak amplitude of the low-frequency bias field.
    pub bias_amplitude: f64,
    /// Spread of the per-patient global intensity offset.
    pub patient_offset_std: f64,
}

impl InstituteProfile {
    /// Large single-scan cohort site (1.0 x 1.0 x 3.0 mm).
    pub fn institute_a() -> Self {
        Self {
            name: "institute-a".into(),
            spacing: [1.0, 1.0, 3.0],
            dims: [64, 64, 21],
            tissue_mean: [930.0, 1045.0, 1030.0, 1010.0, 975.0],
            tissue_std: [12.0, 8.0, 8.0, 6.0, 25.0],
            noise_std: 8.0,
            bias_amplitude: 10.0,
            patient_offset_std: 6.0,
        }
    }

    /// Multi-fraction site (0.9 x 0.9 x 3.0 mm) with a small calibration
    /// offset, more noise and a stronger bias field.
    pub fn institute_b() -> Self {
        Self {
            name: "institute-b".into(),
            spacing: [0.9, 0.9, 3.0],
            dims: [71, 71, 21],
            tissue_mean: [940.0, 1055.0, 1040.0, 1020.0, 985.0],
            tissue_std: [14.0, 9.0, 9.0, 8.0, 28.0],
            noise_std: 12.0,
            bias_amplitude: 20.0,
            patient_offset_std: 8.0,
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "institute-a" | "a" => Some(Self::institute_a()),
            "institute-b" | "b" => Some(Self::institute_b()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(PhantomError::InvalidConfig(format!(
                "spacing {:?} must be positive",
                self.spacing
            )));
        }
        let stds = self.tissue_std.iter().chain([
            &self.noise_std,
            &self.bias_amplitude,
            &self.patient_offset_std,
        ]);
        if stds.clone().any(|&s| !(s >= 0.0 && s.is_finite())) {
            return Err(PhantomError::InvalidConfig(
                "intensity spreads must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Low-frequency multiplicative-looking additive field, `u` in [-1, 1]^3.
    fn bias(&self, u: [f64; 3]) -> f64 {
        self.bias_amplitude * (0.6 * u[0] - 0.3 * u[1] + 0.4 * u[0] * u[2] + 0.3 * (u[1] * u[2]))
    }
}

/// Per-fraction deformation magnitudes and cohort size.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortConfig {
    pub patients: usize,
    /// Scans per patient including the planning scan.
    pub fractions: usize,
    pub dims: [usize; 3],
    pub profile: InstituteProfile,
    /// Range of the bladder volume scale drawn per fraction.
    pub bladder_scale: (f64, f64),
    pub rectum_scale: (f64, f64),
    /// Per-axis standard deviation of the rigid prostate shift, mm.
    pub prostate_shift_std: f64,
    /// Standard deviation of the smooth boundary ripple coefficients.
    pub ripple_std: f64,
    pub seed: u64,
}

impl CohortConfig {
    pub fn new(profile: InstituteProfile, patients: usize, fractions: usize, seed: u64) -> Self {
        Self {
            patients,
            fractions,
            dims: profile.dims,
            profile,
            bladder_scale: (0.7, 1.4),
            rectum_scale: (0.8, 1.3),
            prostate_shift_std: 1.5,
            ripple_std: 0.03,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patients == 0 || self.fractions == 0 {
            return Err(PhantomError::InvalidConfig(
                "patient and fraction counts must be at least 1".into(),
            ));
        }
        for (name, (lo, hi)) in [("bladder", self.bladder_scale), ("rectum", self.rectum_scale)] {
            if !(0.3 < lo && lo <= hi && hi < 3.0) {
                return Err(PhantomError::InvalidConfig(format!(
                    "{name} scale range ({lo}, {hi}) must lie within (0.3, 3.0)"
                )));
            }
        }
        if !(self.prostate_shift_std >= 0.0 && self.ripple_std >= 0.0) {
            return Err(PhantomError::InvalidConfig(
                "deformation spreads must be non-negative".into(),
            ));
        }
        self.profile.validate()?;
        self.geometry().map(|_| ()).map_err(PhantomError::from)
    }

    /// Grid centred on the origin.
    pub fn geometry(&self) -> std::result::Result<Geometry, VolumeError> {
        let s = self.profile.spacing;
        let origin = [0, 1, 2].map(|a| -((self.dims[a] as f64 - 1.0) * s[a]) / 2.0);
        Geometry::new(self.dims, s, origin)
    }
}

/// Superellipsoid in its own frame, `(|u/a|^e + |v/b|^e + |w/c|^e)^(1/e) <= 1`,
/// optionally rippled by a smooth function of direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrganShape {
    pub center: [f64; 3],
    pub radii: [f64; 3],
    /// Rotation angles about x, y, z (radians), applied in that order.
    pub angles: [f64; 3],
    pub exponent: f64,
    /// Coefficients of the boundary ripple basis; zero for the base shape.
    pub ripple: [f64; RIPPLE_TERMS],
}

pub const RIPPLE_TERMS: usize = 8;

impl OrganShape {
    fn rotation(&self) -> [[f64; 3]; 3] {
        let [a, b, c] = self.angles;
        let (sa, ca) = a.sin_cos();
        let (sb, cb) = b.sin_cos();
        let (sc, cc) = c.sin_cos();
        let rx = [[1.0, 0.0, 0.0], [0.0, ca, -sa], [0.0, sa, ca]];
        let ry = [[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]];
        let rz = [[cc, -sc, 0.0], [sc, cc, 0.0], [0.0, 0.0, 1.0]];
        matmul(rz, matmul(ry, rx))
    }

    /// Whether the physical point `p` (mm) lies inside the organ.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        self.contains_with(&self.rotation(), p)
    }

    fn contains_with(&self, rot: &[[f64; 3]; 3], p: [f64; 3]) -> bool {
        let d = [0, 1, 2].map(|i| p[i] - self.center[i]);
        // organ frame = R^T d
        let u = [0, 1, 2].map(|j| (0..3).map(|i| rot[i][j] * d[i]).sum::<f64>());
        let e = self.exponent;
        let f = (0..3)
            .map(|k| (u[k] / self.radii[k]).abs().powf(e))
            .sum::<f64>()
            .powf(1.0 / e);
        f <= 1.0 + ripple_at(&self.ripple, u)
    }

    /// Half-extent of an axis-aligned box enclosing the organ, mm.
    fn half_extent(&self) -> [f64; 3] {
        let rot = self.rotation();
        // superellipsoids with e > 2 bulge towards the corners of their box
        let bulge = 3f64.powf((0.5 - 1.0 / self.exponent).max(0.0));
        let ripple: f64 = 1.0 + ripple_bound(&self.ripple);
        [0, 1, 2].map(|i| {
            (0..3)
                .map(|j| (rot[i][j] * self.radii[j]).powi(2))
                .sum::<f64>()
                .sqrt()
                * bulge
                * ripple
        })
    }

    /// Volume of the un-rippled superellipsoid, mm^3.
    pub fn analytic_volume(&self) -> f64 {
        let e = self.exponent;
        let g = |x: f64| libm::tgamma(x);
        8.0 * self.radii.iter().product::<f64>() * g(1.0 + 1.0 / e).powi(3) / g(1.0 + 3.0 / e)
    }
}

fn matmul(a: [[f64; 3]; 3], b: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

/// Smooth low-order functions of the unit direction of `u`, each bounded by 1.
fn ripple_basis(u: [f64; 3]) -> [f64; RIPPLE_TERMS] {
    let n = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
    if n == 0.0 {
        return [0.0; RIPPLE_TERMS];
    }
    let [x, y, z] = u.map(|v| v / n);
    [
        x,
        y,
        z,
        2.0 * x * y,
        2.0 * y * z,
        2.0 * x * z,
        x * x - y * y,
        (3.0 * z * z - 1.0) / 2.0,
    ]
}

fn ripple_at(c: &[f64; RIPPLE_TERMS], u: [f64; 3]) -> f64 {
    ripple_basis(u).iter().zip(c).map(|(b, c)| b * c).sum()
}

/// Upper bound of the ripple over all directions: by Cauchy-Schwarz, the
/// coefficient norm times the basis norm, whose square never exceeds
/// 1 + 4/3 + 1 + 1.
fn ripple_bound(c: &[f64; RIPPLE_TERMS]) -> f64 {
    let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
    norm * (13.0f64 / 3.0).sqrt()
}

/// Ripple coefficients are Gaussian with their joint norm capped at 2.5 sigma.
const RIPPLE_NORM_CAP: f64 = 2.5;

/// One patient's undeformed anatomy plus the deformation magnitudes that
/// apply to all their fractions.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientAnatomy {
    pub patient_index: usize,
    pub patient_id: String,
    /// Base shapes indexed by `OrganLabel::code() - 1`.
    pub organs: [OrganShape; 4],
    pub bladder_scale: (f64, f64),
    pub rectum_scale: (f64, f64),
    pub prostate_shift_std: f64,
    pub ripple_std: f64,
}

impl PatientAnatomy {
    pub fn organ(&self, label: OrganLabel) -> &OrganShape {
        &self.organs[label.code() as usize - 1]
    }
}

pub fn patient_id(index: usize) -> String {
    format!("patient-{index:03}")
}

struct Template {
    center: [f64; 3],
    radii: [f64; 3],
    exponent: f64,
}

const TEMPLATES: [Template; 4] = [
    // prostate
    Template {
        center: [0.0, 0.0, -6.0],
        radii: [8.0, 7.0, 8.0],
        exponent: 2.3,
    },
    // seminal vesicles: a flat wide lobe above the prostate, behind the bladder
    Template {
        center: [0.0, 7.0, 5.0],
        radii: [11.0, 3.0, 4.0],
        exponent: 2.0,
    },
    // bladder
    Template {
        center: [0.0, -13.0, 8.0],
        radii: [13.0, 9.0, 7.0],
        exponent: 2.0,
    },
    // rectum: elongated along z
    Template {
        center: [0.0, 15.0, -3.0],
        radii: [7.0, 6.0, 11.0],
        exponent: 2.0,
    },
];

/// Draws a patient's base anatomy. The layout must fit its largest
/// deformation inside the grid with a 2-voxel margin.
pub fn sample_anatomy(config: &CohortConfig, patient_index: usize) -> Result<PatientAnatomy> {
    if patient_index >= config.patients {
        return Err(PhantomError::InvalidConfig(format!(
            "patient index {patient_index} out of range for {} patients",
            config.patients
        )));
    }
    let mut r = rng::stream(config.seed, &[0xA7, patient_index as u64]);
    let tilt = r.random_range(-0.15..0.15);
    let yaw = r.random_range(-0.1..0.1);
    let size = r.random_range(0.92..1.08);
    let organs = [0, 1, 2, 3].map(|k| {
        let t = &TEMPLATES[k];
        let jitter = [0, 1, 2].map(|_| r.random_range(-2.0..2.0));
        let radii = t.radii.map(|v| v * size * r.random_range(0.92..1.08));
        OrganShape {
            center: [0, 1, 2].map(|a| t.center[a] * size + jitter[a]),
            radii,
            angles: [
                tilt + r.random_range(-0.05..0.05),
                r.random_range(-0.05..0.05),
                yaw,
            ],
            exponent: t.exponent,
            ripple: [0.0; RIPPLE_TERMS],
        }
    });
    let anatomy = PatientAnatomy {
        patient_index,
        patient_id: patient_id(patient_index),
        organs,
        bladder_scale: config.bladder_scale,
        rectum_scale: config.rectum_scale,
        prostate_shift_std: config.prostate_shift_std,
        ripple_std: config.ripple_std,
    };
    check_layout(&anatomy, &config.geometry()?)?;
    Ok(anatomy)
}

fn check_layout(anatomy: &PatientAnatomy, geometry: &Geometry) -> Result<()> {
    let worst = FractionDeformation::extreme(anatomy);
    let shapes = worst.apply(anatomy);
    for (k, shape) in shapes.iter().enumerate() {
        let organ = OrganLabel::ORGANS[k];
        let slack = if k < 2 { 3.0 * anatomy.prostate_shift_std } else { 0.0 };
        let half = shape.half_extent().map(|h| h + slack);
        let fits = (0..3).all(|a| {
            let lo = geometry.origin[a] + 2.0 * geometry.spacing[a];
            let hi = geometry.origin[a] + (geometry.dims[a] as f64 - 3.0) * geometry.spacing[a];
            shape.center[a] - half[a] >= lo && shape.center[a] + half[a] <= hi
        });
        if !fits {
            return Err(PhantomError::InfeasibleLayout {
                organ,
                dims: geometry.dims,
            });
        }
    }
    Ok(())
}

/// Deviation of one fraction from the planning anatomy.
#[derive(Debug, Clone, PartialEq)]
pub struct FractionDeformation {
    /// Bladder volume factor.
    pub bladder_scale: f64,
    pub rectum_scale: f64,
    /// Rigid shift of prostate and seminal vesicles, mm.
    pub prostate_shift: [f64; 3],
    pub bladder_ripple: [f64; RIPPLE_TERMS],
    pub rectum_ripple: [f64; RIPPLE_TERMS],
}

impl FractionDeformation {
    pub fn identity() -> Self {
        Self {
            bladder_scale: 1.0,
            rectum_scale: 1.0,
            prostate_shift: [0.0; 3],
            bladder_ripple: [0.0; RIPPLE_TERMS],
            rectum_ripple: [0.0; RIPPLE_TERMS],
        }
    }

    /// Draws the deformation of `fraction_index`; fraction 0 is the planning
    /// state and never deformed.
    pub fn sample(anatomy: &PatientAnatomy, fraction_index: usize, seed: u64) -> Self {
        if fraction_index == 0 {
            return Self::identity();
        }
        let mut r = rng::stream(
            seed,
            &[0xDF, anatomy.patient_index as u64, fraction_index as u64],
        );
        let (blo, bhi) = anatomy.bladder_scale;
        let (rlo, rhi) = anatomy.rectum_scale;
        let bladder_scale = if bhi > blo { r.random_range(blo..bhi) } else { blo };
        let rectum_scale = if rhi > rlo { r.random_range(rlo..rhi) } else { rlo };
        let shift = Normal::new(0.0, anatomy.prostate_shift_std).expect("finite std");
        let prostate_shift = [0, 1, 2].map(|_| clamp3(shift.sample(&mut r), anatomy.prostate_shift_std));
        let ripple = Normal::new(0.0, anatomy.ripple_std).expect("finite std");
        let cap = RIPPLE_NORM_CAP * anatomy.ripple_std;
        let draw = |r: &mut StreamRng| {
            let mut c = [0; RIPPLE_TERMS].map(|_| ripple.sample(r));
            let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > cap {
                c.iter_mut().for_each(|v| *v *= cap / norm);
            }
            c
        };
        let bladder_ripple = draw(&mut r);
        let rectum_ripple = draw(&mut r);
        Self {
            bladder_scale,
            rectum_scale,
            prostate_shift,
            bladder_ripple,
            rectum_ripple,
        }
    }

    /// Bounding case used for the layout check: maximal filling and the
    /// largest ripple norm. Shifts are accounted for separately since they
    /// have either sign.
    fn extreme(anatomy: &PatientAnatomy) -> Self {
        let mut rip = [0.0; RIPPLE_TERMS];
        rip[0] = RIPPLE_NORM_CAP * anatomy.ripple_std;
        Self {
            bladder_scale: anatomy.bladder_scale.1,
            rectum_scale: anatomy.rectum_scale.1,
            prostate_shift: [0.0; 3],
            bladder_ripple: rip,
            rectum_ripple: rip,
        }
    }

    /// Deformed organ shapes, indexed like [`PatientAnatomy::organs`].
    pub fn apply(&self, anatomy: &PatientAnatomy) -> [OrganShape; 4] {
        let mut out = anatomy.organs;
        for organ in &mut out[..2] {
            for a in 0..3 {
                organ.center[a] += self.prostate_shift[a];
            }
        }
        let scale = |o: &mut OrganShape, s: f64, ripple: [f64; RIPPLE_TERMS]| {
            let k = s.cbrt();
            o.radii = o.radii.map(|r| r * k);
            o.ripple = ripple;
        };
        scale(&mut out[2], self.bladder_scale, self.bladder_ripple);
        scale(&mut out[3], self.rectum_scale, self.rectum_ripple);
        out
    }
}

fn clamp3(v: f64, std: f64) -> f64 {
    v.clamp(-3.0 * std, 3.0 * std)
}

/// Labels of a set of organ shapes on `geometry`. Overlaps resolve by the
/// fixed priority prostate > seminal vesicles > bladder > rectum.
pub fn voxelize(shapes: &[OrganShape; 4], geometry: &Geometry) -> LabelMap3 {
    let rots: Vec<_> = shapes.iter().map(|s| s.rotation()).collect();
    let half: Vec<_> = shapes.iter().map(|s| s.half_extent()).collect();
    let mut labels = vec![0u8; geometry.len()];
    for (i, l) in labels.iter_mut().enumerate() {
        let p = geometry.position(geometry.coords(i));
        for k in 0..4 {
            let s = &shapes[k];
            if (0..3).any(|a| (p[a] - s.center[a]).abs() > half[k][a]) {
                continue;
            }
            if s.contains_with(&rots[k], p) {
                *l = OrganLabel::ORGANS[k].code();
                break;
            }
        }
    }
    LabelMap3::new(*geometry, labels).expect("organ codes are valid labels")
}

/// Image and labels of one fraction of one patient.
pub fn generate_fraction(
    anatomy: &PatientAnatomy,
    config: &CohortConfig,
    fraction_index: usize,
) -> Result<(Volume3, LabelMap3)> {
    let deformation = FractionDeformation::sample(anatomy, fraction_index, config.seed);
    generate_fraction_with(anatomy, config, &deformation, fraction_index)
}

/// As [`generate_fraction`] with an explicit deformation. `fraction_index`
/// only keys the noise stream.
pub fn generate_fraction_with(
    anatomy: &PatientAnatomy,
    config: &CohortConfig,
    deformation: &FractionDeformation,
    fraction_index: usize,
) -> Result<(Volume3, LabelMap3)> {
    let geometry = config.geometry()?;
    let profile = &config.profile;
    let labels = voxelize(&deformation.apply(anatomy), &geometry);
    let offset = {
        let mut r = rng::stream(config.seed, &[0xB1, anatomy.patient_index as u64]);
        Normal::new(0.0, profile.patient_offset_std)
            .expect("finite std")
            .sample(&mut r)
    };
    let mut r = rng::stream(
        config.seed,
        &[0xF4, anatomy.patient_index as u64, fraction_index as u64],
    );
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let half = geometry.extent().map(|e| e / 2.0);
    let voxels = labels
        .labels()
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let p = geometry.position(geometry.coords(i));
            let u = [0, 1, 2].map(|a| (p[a] / half[a]).clamp(-1.0, 1.0));
            let l = l as usize;
            let tissue = profile.tissue_std[l] * unit.sample(&mut r);
            let noise = profile.noise_std * unit.sample(&mut r);
            let v = profile.tissue_mean[l] + offset + profile.bias(u) + tissue + noise;
            v.round().clamp(i16::MIN as f64, i16::MAX as f64) as f32
        })
        .collect();
    Ok((Volume3::new(geometry, voxels)?, labels))
}

/// All scans of one patient; `scans[0]` is the planning pair.
#[derive(Debug, Clone, PartialEq)]
pub struct FractionSeries {
    pub patient_id: String,
    pub profile: String,
    pub scans: Vec<(Volume3, LabelMap3)>,
}

impl FractionSeries {
    pub fn planning(&self) -> &(Volume3, LabelMap3) {
        &self.scans[0]
    }

    /// Number of treatment fractions after the planning scan.
    pub fn treatment_fractions(&self) -> usize {
        self.scans.len() - 1
    }

    /// Every scan resampled to `spacing` (trilinear images, nearest labels).
    pub fn resampled(&self, spacing: [f64; 3]) -> std::result::Result<Self, VolumeError> {
        let scans = self
            .scans
            .iter()
            .map(|(v, l)| Ok((volume::resample_volume(v, spacing)?, volume::resample_labels(l, spacing)?)))
            .collect::<std::result::Result<_, VolumeError>>()?;
        Ok(Self {
            patient_id: self.patient_id.clone(),
            profile: self.profile.clone(),
            scans,
        })
    }
}

pub fn generate_series(config: &CohortConfig, patient_index: usize) -> Result<FractionSeries> {
    let anatomy = sample_anatomy(config, patient_index)?;
    let scans = (0..config.fractions)
        .map(|j| generate_fraction(&anatomy, config, j))
        .collect::<Result<_>>()?;
    Ok(FractionSeries {
        patient_id: anatomy.patient_id,
        profile: config.profile.name.clone(),
        scans,
    })
}

pub fn generate_cohort(config: &CohortConfig) -> Result<Vec<FractionSeries>> {
    config.validate()?;
    (0..config.patients)
        .map(|p| generate_series(config, p))
        .collect()
}

pub const MANIFEST: &str = "manifest.txt";

fn fmt_pair(p: (f64, f64)) -> String {
    format!("{} {}", p.0, p.1)
}

/// Key-value description of a cohort config.
pub fn manifest_text(config: &CohortConfig) -> String {
    let mut s = String::new();
    let p = &config.profile;
    let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
    let _ = writeln!(s, "profile = {}", p.name);
    let _ = writeln!(s, "patients = {}", config.patients);
    let _ = writeln!(s, "fractions = {}", config.fractions);
    let _ = writeln!(
        s,
        "dims = {} {} {}",
        config.dims[0], config.dims[1], config.dims[2]
    );
    let _ = writeln!(s, "spacing = {}", join(&p.spacing));
    let _ = writeln!(s, "tissue_mean = {}", join(&p.tissue_mean));
    let _ = writeln!(s, "tissue_std = {}", join(&p.tissue_std));
    let _ = writeln!(s, "noise_std = {}", p.noise_std);
    let _ = writeln!(s, "bias_amplitude = {}", p.bias_amplitude);
    let _ = writeln!(s, "patient_offset_std = {}", p.patient_offset_std);
    let _ = writeln!(s, "bladder_scale = {}", fmt_pair(config.bladder_scale));
    let _ = writeln!(s, "rectum_scale = {}", fmt_pair(config.rectum_scale));
    let _ = writeln!(s, "prostate_shift_std = {}", config.prostate_shift_std);
    let _ = writeln!(s, "ripple_std = {}", config.ripple_std);
    let _ = writeln!(s, "seed = {}", config.seed);
    s
}

pub fn fraction_dir(root: &Path, patient_id: &str, j: usize) -> std::path::PathBuf {
    root.join(patient_id).join(format!("fraction-{j}"))
}

/// Writes `root/<patient>/fraction-<j>/{image,labels}.mha` and the manifest.
pub fn write_cohort(root: &Path, config: &CohortConfig, cohort: &[FractionSeries]) -> Result<()> {
    fs::create_dir_all(root)?;
    for series in cohort {
        for (j, (image, labels)) in series.scans.iter().enumerate() {
            let dir = fraction_dir(root, &series.patient_id, j);
            fs::create_dir_all(&dir)?;
            volume::write_volume(image, dir.join("image.mha"))?;
            volume::write_labels(labels, dir.join("labels.mha"))?;
        }
    }
    fs::write(root.join(MANIFEST), manifest_text(config))?;
    Ok(())
}

/// Reads every patient directory under `root` in sorted order.
pub fn read_cohort(root: &Path) -> Result<Vec<FractionSeries>> {
    let manifest = fs::read_to_string(root.join(MANIFEST)).map_err(|e| {
        PhantomError::Layout(format!("cannot read {}: {e}", root.join(MANIFEST).display()))
    })?;
    let profile = manifest
        .lines()
        .find_map(|l| l.strip_prefix("profile = "))
        .unwrap_or("unknown")
        .to_string();
    let mut patients: Vec<String> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    patients.sort();
    patients
        .into_iter()
        .map(|id| {
            let mut scans = Vec::new();
            for j in 0.. {
                let dir = fraction_dir(root, &id, j);
                if !dir.is_dir() {
                    break;
                }
                let image = volume::read_image(dir.join("image.mha"))?;
                let labels = volume::read_labels(dir.join("labels.mha"))?;
                if !labels.matches(&image) {
                    return Err(VolumeError::GeometryMismatch.into());
                }
                scans.push((image, labels));
            }
            if scans.is_empty() {
                return Err(PhantomError::Layout(format!("{id} has no fraction-0 scan")));
            }
            Ok(FractionSeries {
                patient_id: id,
                profile: profile.clone(),
                scans,
            })
        })
        .collect()
}
