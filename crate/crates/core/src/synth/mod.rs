//! Synthetic randomized teacher-assignment experiments.
//!
//! Generates populations of districts, schools, and randomization blocks,
//! groups students into classrooms with a controllable degree of tracking,
//! randomly assigns teachers to classrooms within blocks, applies
//! configurable teacher/student non-compliance and attrition, and computes
//! outcomes from a known production function. Because the true parameters
//! and latent draws are retained (as oracle-only fields), every downstream
//! estimate can be checked against ground truth.

mod io;

pub use io::{export, import, ExportOptions, IoError};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::design;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("config invalid: {0}")]
    Config(String),
    #[error("production parameters invalid: {0}")]
    Params(String),
    #[error("io error: {0}")]
    Io(#[from] io::IoError),
}

macro_rules! id_type {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
        )]
        pub struct $name(pub u32);

        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

id_type!(StudentId);
id_type!(TeacherId);
id_type!(SectionId);
id_type!(BlockId);
id_type!(SchoolId);
id_type!(DistrictId);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SchoolType {
    Elementary,
    Middle,
}

impl std::fmt::Display for SchoolType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SchoolType::Elementary => write!(f, "elementary"),
            SchoolType::Middle => write!(f, "middle"),
        }
    }
}

/// Visible student fields: everything an estimator is allowed to see.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudentRecord {
    pub id: StudentId,
    pub district: DistrictId,
    pub school: SchoolId,
    pub block: BlockId,
    pub assigned_section: SectionId,
    pub realized_section: SectionId,
    /// Baseline achievement as a within-district z-score.
    pub baseline: f64,
    /// Generic auxiliary covariates (age-like, indicator-like).
    pub aux1: f64,
    pub aux2: f64,
    pub outcome: f64,
}

/// Oracle-only student fields, excluded from estimator-visible views.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudentOracle {
    pub latent_v: f64,
    /// Type label used when the outcome was generated.
    pub true_type: usize,
}

#[derive(Debug, Clone)]
pub struct Student {
    pub record: StudentRecord,
    pub oracle: Option<StudentOracle>,
}

/// Visible teacher fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TeacherRecord {
    pub id: TeacherId,
    pub block: BlockId,
    /// Continuous practice score on the 1–4 rubric scale.
    pub practice: f64,
    /// Experience-like attribute, correlated with latent quality.
    pub aux1: f64,
    /// Education-like attribute, correlated with latent quality; missing for
    /// a share of teachers.
    pub aux2: Option<f64>,
    /// Demographic-like indicator, independent of quality.
    pub aux3: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TeacherOracle {
    pub latent_u: f64,
    pub true_level: usize,
}

#[derive(Debug, Clone)]
pub struct Teacher {
    pub record: TeacherRecord,
    pub oracle: Option<TeacherOracle>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Section {
    pub id: SectionId,
    pub block: BlockId,
    pub assigned_teacher: TeacherId,
    pub realized_teacher: TeacherId,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Block {
    pub id: BlockId,
    pub school: SchoolId,
    pub district: DistrictId,
    pub school_type: SchoolType,
}

/// A complete experiment: the assignment as drawn plus the links as
/// realized after non-compliance and attrition.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub students: Vec<Student>,
    pub teachers: Vec<Teacher>,
    pub sections: Vec<Section>,
    pub blocks: Vec<Block>,
}

impl Dataset {
    /// Estimator-visible view: latent and truth columns are unreachable
    /// through it.
    pub fn visible(&self) -> VisibleDataset<'_> {
        VisibleDataset { ds: self }
    }

    pub fn section(&self, id: SectionId) -> Option<&Section> {
        self.sections.iter().find(|s| s.id == id)
    }

    pub fn teacher(&self, id: TeacherId) -> Option<&Teacher> {
        self.teachers.iter().find(|t| t.record.id == id)
    }

    /// Roster of students assigned to each section, in student order.
    pub fn assigned_rosters(&self) -> std::collections::BTreeMap<SectionId, Vec<usize>> {
        let mut map: std::collections::BTreeMap<SectionId, Vec<usize>> = Default::default();
        for (i, s) in self.students.iter().enumerate() {
            map.entry(s.record.assigned_section).or_default().push(i);
        }
        map
    }

    pub fn realized_rosters(&self) -> std::collections::BTreeMap<SectionId, Vec<usize>> {
        let mut map: std::collections::BTreeMap<SectionId, Vec<usize>> = Default::default();
        for (i, s) in self.students.iter().enumerate() {
            map.entry(s.record.realized_section).or_default().push(i);
        }
        map
    }
}

/// Estimator-facing view over a [`Dataset`]; exposes only visible records.
#[derive(Clone, Copy)]
pub struct VisibleDataset<'a> {
    ds: &'a Dataset,
}

impl<'a> VisibleDataset<'a> {
    pub fn students(&self) -> impl ExactSizeIterator<Item = &'a StudentRecord> {
        self.ds.students.iter().map(|s| &s.record)
    }

    pub fn teachers(&self) -> impl ExactSizeIterator<Item = &'a TeacherRecord> {
        self.ds.teachers.iter().map(|t| &t.record)
    }

    pub fn sections(&self) -> &'a [Section] {
        &self.ds.sections
    }

    pub fn blocks(&self) -> &'a [Block] {
        &self.ds.blocks
    }

    pub fn n_students(&self) -> usize {
        self.ds.students.len()
    }
}

/// True production-function parameters for outcome generation.
///
/// Dummy blocks follow the omitted-reference convention: `beta[k-1]` is the
/// effect of own type `k` relative to type 0, and interaction blocks are
/// stored row-major (`eta[(k-1)*(L-1) + (l-1)]` for own type `k` with
/// teacher level `l`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProductionParams {
    pub alpha: f64,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub delta: Vec<f64>,
    pub zeta: Vec<f64>,
    pub eta: Vec<f64>,
    pub lambda: Vec<f64>,
    pub rho: f64,
    pub sd_v: f64,
    pub sd_u: f64,
}

impl ProductionParams {
    /// All-zero parameters of the right shape for `k` student types and `l`
    /// teacher levels.
    pub fn zeros(k: usize, l: usize) -> Self {
        Self {
            alpha: 0.0,
            beta: vec![0.0; k - 1],
            gamma: vec![0.0; k - 1],
            delta: vec![0.0; l - 1],
            zeta: vec![0.0; (k - 1) * (k - 1)],
            eta: vec![0.0; (k - 1) * (l - 1)],
            lambda: vec![0.0; (l - 1) * (k - 1)],
            rho: 0.0,
            sd_v: 0.0,
            sd_u: 0.0,
        }
    }

    pub fn validate(&self, k: usize, l: usize) -> Result<(), SynthError> {
        let want = |name: &str, got: usize, expect: usize| {
            if got == expect {
                Ok(())
            } else {
                Err(SynthError::Params(format!(
                    "{name} has length {got}, expected {expect} for K={k}, L={l}"
                )))
            }
        };
        want("beta", self.beta.len(), k - 1)?;
        want("gamma", self.gamma.len(), k - 1)?;
        want("delta", self.delta.len(), l - 1)?;
        want("zeta", self.zeta.len(), (k - 1) * (k - 1))?;
        want("eta", self.eta.len(), (k - 1) * (l - 1))?;
        want("lambda", self.lambda.len(), (l - 1) * (k - 1))?;
        if self.sd_v < 0.0 || self.sd_u < 0.0 {
            return Err(SynthError::Params(
                "sd_v and sd_u must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Evaluate the production function for one student.
///
/// `own_type` in `0..K`, `peer_fractions` of length `K-1` (non-reference
/// categories), `level` in `0..L`; `v`, `vbar`, `u` are the latent student,
/// peer-mean, and teacher terms.
pub fn production_outcome(
    params: &ProductionParams,
    own_type: usize,
    peer_fractions: &[f64],
    level: usize,
    v: f64,
    vbar: f64,
    u: f64,
) -> f64 {
    let k1 = params.beta.len();
    let l1 = params.delta.len();
    let mut y = params.alpha + v + params.rho * vbar + u;
    if own_type > 0 {
        y += params.beta[own_type - 1];
    }
    for (c, frac) in peer_fractions.iter().enumerate() {
        y += params.gamma[c] * frac;
    }
    if level > 0 {
        y += params.delta[level - 1];
    }
    if own_type > 0 {
        for (c, frac) in peer_fractions.iter().enumerate() {
            y += params.zeta[(own_type - 1) * k1 + c] * frac;
        }
        if level > 0 {
            y += params.eta[(own_type - 1) * l1 + (level - 1)];
        }
    }
    if level > 0 {
        for (c, frac) in peer_fractions.iter().enumerate() {
            y += params.lambda[(level - 1) * k1 + c] * frac;
        }
    }
    y
}

/// Deliberate violations of the idiosyncratic non-compliance assumptions,
/// used to measure the power of the diagnostic tests.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EndogenousMode {
    /// How strongly deviations load on latent quality/ability.
    pub strength: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PopulationConfig {
    pub n_districts: usize,
    pub schools_per_district: usize,
    pub blocks_per_school: usize,
    /// Sections per randomization block; at least two, otherwise no
    /// within-block variation exists.
    pub classrooms_per_block: usize,
    pub class_size_range: (usize, usize),
    /// Number of student types (baseline-score categories).
    pub k: usize,
    /// Number of teacher levels (practice-score categories).
    pub l: usize,
    /// Target marginal distribution of teacher levels.
    pub teacher_level_marginal: Vec<f64>,
    /// Practice-score cutoffs on the 1–4 scale; length `l - 1`.
    pub teacher_cutoffs: Vec<f64>,
    /// 0 = random grouping of students into classrooms, 1 = perfect
    /// tracking on baseline score.
    pub sorting_strength: f64,
    pub noncompliance_teachers: f64,
    pub noncompliance_students: f64,
    /// Cross-block attrition: fraction of student rows deleted.
    pub attrition: f64,
    /// When set, non-compliance is keyed to latent quality/ability,
    /// violating the idiosyncratic-deviation assumptions on purpose.
    pub endogenous: Option<EndogenousMode>,
    /// 0 = proper randomization of teachers to classrooms; positive values
    /// rig the assignment to track classroom baseline scores.
    pub assignment_bias: f64,
    /// Loading of latent student ability on baseline score.
    pub v_loading: f64,
    pub seed: u64,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        Self {
            n_districts: 4,
            schools_per_district: 6,
            blocks_per_school: 2,
            classrooms_per_block: 3,
            class_size_range: (12, 17),
            k: 3,
            l: 3,
            teacher_level_marginal: vec![0.18, 0.62, 0.20],
            teacher_cutoffs: vec![2.25, 2.75],
            sorting_strength: 0.5,
            noncompliance_teachers: 0.3,
            noncompliance_students: 0.05,
            attrition: 0.0,
            endogenous: None,
            assignment_bias: 0.0,
            v_loading: 0.5,
            seed: 0,
        }
    }
}

impl PopulationConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let err = |m: String| Err(SynthError::Config(m));
        if self.n_districts == 0 || self.schools_per_district == 0 || self.blocks_per_school == 0 {
            return err("district/school/block counts must be positive".into());
        }
        if self.classrooms_per_block < 2 {
            return err(format!(
                "classrooms_per_block must be at least 2, got {}",
                self.classrooms_per_block
            ));
        }
        if self.class_size_range.0 < 2 || self.class_size_range.0 > self.class_size_range.1 {
            return err(format!(
                "class_size_range {:?} must satisfy 2 <= min <= max",
                self.class_size_range
            ));
        }
        if self.k < 2 || self.l < 2 {
            return err(format!(
                "K and L must be at least 2, got K={}, L={}",
                self.k, self.l
            ));
        }
        if self.teacher_level_marginal.len() != self.l {
            return err(format!(
                "teacher_level_marginal has {} entries, expected L={}",
                self.teacher_level_marginal.len(),
                self.l
            ));
        }
        let msum: f64 = self.teacher_level_marginal.iter().sum();
        if self.teacher_level_marginal.iter().any(|&p| p < 0.0) || (msum - 1.0).abs() > 1e-9 {
            return err("teacher_level_marginal must be a probability vector".into());
        }
        if self.teacher_cutoffs.len() != self.l - 1 {
            return err(format!(
                "teacher_cutoffs has {} entries, expected L-1={}",
                self.teacher_cutoffs.len(),
                self.l - 1
            ));
        }
        if !self.teacher_cutoffs.windows(2).all(|w| w[0] < w[1])
            || self.teacher_cutoffs.first().is_some_and(|&c| c <= 1.0)
            || self.teacher_cutoffs.last().is_some_and(|&c| c >= 4.0)
        {
            return err("teacher_cutoffs must be strictly ascending within (1, 4)".into());
        }
        for (name, rate) in [
            ("sorting_strength", self.sorting_strength),
            ("noncompliance_teachers", self.noncompliance_teachers),
            ("noncompliance_students", self.noncompliance_students),
            ("attrition", self.attrition),
            ("assignment_bias", self.assignment_bias),
        ] {
            if !(0.0..=1.0).contains(&rate) {
                return err(format!("{name} must lie in [0, 1], got {rate}"));
            }
        }
        Ok(())
    }

    fn min_students_per_district(&self) -> usize {
        self.schools_per_district
            * self.blocks_per_school
            * self.classrooms_per_block
            * self.class_size_range.0
    }
}

// RNG stream indices; replications elsewhere use streams >= 16.
const STREAM_POPULATION: u64 = 0;
const STREAM_NONCOMPLIANCE: u64 = 1;
const STREAM_ATTRITION: u64 = 2;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generate a complete synthetic experiment: population, random teacher
/// assignment, non-compliance, attrition, and outcomes.
pub fn generate(
    config: &PopulationConfig,
    params: &ProductionParams,
) -> Result<Dataset, SynthError> {
    config.validate()?;
    params.validate(config.k, config.l)?;
    if config.min_students_per_district() < config.k {
        return Err(SynthError::Config(
            "districts too small to support the requested number of student types".into(),
        ));
    }

    let mut rng = stream_rng(config.seed, STREAM_POPULATION);
    let mut dataset = generate_assigned(config, params, &mut rng)?;
    dataset = apply_noncompliance(&dataset, config)?;
    apply_attrition(&mut dataset, config);
    recompute_outcomes(&mut dataset, params, config);
    Ok(dataset)
}

/// Population, rosters, latent draws, and the randomized teacher
/// assignment, with realized links equal to assigned ones and outcomes not
/// yet computed.
fn generate_assigned(
    config: &PopulationConfig,
    params: &ProductionParams,
    rng: &mut ChaCha8Rng,
) -> Result<Dataset, SynthError> {
    let std_normal = StandardNormal;
    let practice_beta = Beta::new(2.0, 2.0).expect("valid beta");
    let size_range = Uniform::new_inclusive(config.class_size_range.0, config.class_size_range.1)
        .expect("valid range");

    let mut blocks = Vec::new();
    let mut sections = Vec::new();
    let mut teachers = Vec::new();
    let mut students: Vec<Student> = Vec::new();

    let mut next_block = 0u32;
    let mut next_section = 0u32;
    let mut next_teacher = 0u32;
    let mut next_student = 0u32;
    let mut next_school = 0u32;

    // Practice-score boundaries on the 1-4 scale for each level.
    let mut bounds = vec![1.0];
    bounds.extend_from_slice(&config.teacher_cutoffs);
    bounds.push(4.0);

    for d in 0..config.n_districts {
        let district = DistrictId(d as u32);
        let district_start = students.len();
        // (block index range, section ids, sizes) for roster assignment below.
        let mut district_blocks: Vec<(usize, Vec<(SectionId, usize)>)> = Vec::new();

        for _ in 0..config.schools_per_district {
            let school = SchoolId(next_school);
            next_school += 1;
            let school_type = if rng.random::<f64>() < 0.6 {
                SchoolType::Elementary
            } else {
                SchoolType::Middle
            };
            for _ in 0..config.blocks_per_school {
                let block = BlockId(next_block);
                next_block += 1;
                blocks.push(Block {
                    id: block,
                    school,
                    district,
                    school_type,
                });

                let mut block_sections = Vec::new();
                for _ in 0..config.classrooms_per_block {
                    let section = SectionId(next_section);
                    next_section += 1;
                    let size = size_range.sample(rng);
                    block_sections.push((section, size));

                    // One teacher created per section; the assignment to
                    // sections is randomized below.
                    let level = sample_categorical(&config.teacher_level_marginal, rng);
                    let (lo, hi) = (bounds[level], bounds[level + 1]);
                    let practice = lo + (hi - lo) * practice_beta.sample(rng);
                    let u_noise: f64 = std_normal.sample(rng);
                    let latent_u = params.sd_u * u_noise;
                    let aux1_noise: f64 = std_normal.sample(rng);
                    let aux1 = 6.0 + 3.0 * latent_u + aux1_noise;
                    let aux2_noise: f64 = std_normal.sample(rng);
                    let aux2 = if rng.random::<f64>() < 0.7 {
                        Some(latent_u + aux2_noise)
                    } else {
                        None
                    };
                    let aux3 = if rng.random::<f64>() < 0.3 { 1.0 } else { 0.0 };
                    teachers.push(Teacher {
                        record: TeacherRecord {
                            id: TeacherId(next_teacher),
                            block,
                            practice,
                            aux1,
                            aux2,
                            aux3,
                        },
                        oracle: Some(TeacherOracle {
                            latent_u,
                            true_level: level,
                        }),
                    });
                    next_teacher += 1;
                }

                // Raw baseline draws for this block's students; z-scored per
                // district once the district is complete.
                let block_start = students.len();
                for &(_, size) in &block_sections {
                    for _ in 0..size {
                        let raw: f64 = std_normal.sample(rng);
                        let aux1_noise: f64 = std_normal.sample(rng);
                        let aux1 = 10.0 + 1.5 * aux1_noise;
                        let aux2 = if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
                        students.push(Student {
                            record: StudentRecord {
                                id: StudentId(next_student),
                                district,
                                school,
                                block,
                                // placeholder; set when rosters are formed
                                assigned_section: SectionId(u32::MAX),
                                realized_section: SectionId(u32::MAX),
                                baseline: raw,
                                aux1,
                                aux2,
                                outcome: f64::NAN,
                            },
                            oracle: None,
                        });
                        next_student += 1;
                    }
                }
                district_blocks.push((block_start, block_sections.clone()));
            }
        }

        // Within-district z-scores.
        let dslice = &mut students[district_start..];
        let n = dslice.len() as f64;
        let mean = dslice.iter().map(|s| s.record.baseline).sum::<f64>() / n;
        let var = dslice
            .iter()
            .map(|s| (s.record.baseline - mean).powi(2))
            .sum::<f64>()
            / n;
        let sd = var.sqrt().max(1e-12);
        for s in dslice.iter_mut() {
            s.record.baseline = (s.record.baseline - mean) / sd;
        }

        // Latent ability and generation-time type labels.
        let zscores: Vec<f64> = students[district_start..]
            .iter()
            .map(|s| s.record.baseline)
            .collect();
        let labels = design::ktile_labels(&zscores, config.k);
        for (s, label) in students[district_start..].iter_mut().zip(labels) {
            let noise: f64 = std_normal.sample(rng);
            s.oracle = Some(StudentOracle {
                latent_v: config.v_loading * s.record.baseline + params.sd_v * noise,
                true_type: label,
            });
        }

        // Sort each block's students into sections: tracking strength blends
        // the baseline score with noise, then rosters fill contiguously.
        for (block_start, block_sections) in district_blocks {
            let block_len: usize = block_sections.iter().map(|&(_, size)| size).sum();
            let mut order: Vec<usize> = (block_start..block_start + block_len).collect();
            let keys: Vec<f64> = order
                .iter()
                .map(|&i| {
                    let noise: f64 = std_normal.sample(rng);
                    config.sorting_strength * students[i].record.baseline
                        + (1.0 - config.sorting_strength) * noise
                })
                .collect();
            let mut keyed: Vec<(f64, usize)> =
                keys.into_iter().zip(order.iter().copied()).collect();
            keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            order = keyed.into_iter().map(|(_, i)| i).collect();

            let mut cursor = 0;
            for &(section, size) in &block_sections {
                for &i in &order[cursor..cursor + size] {
                    students[i].record.assigned_section = section;
                    students[i].record.realized_section = section;
                }
                cursor += size;
            }
        }
    }

    // Randomize teachers to sections within each block. With
    // assignment_bias = 0 this is a uniform permutation; positive bias sorts
    // high-practice teachers toward high-baseline classrooms.
    let mut section_mean_baseline: std::collections::HashMap<SectionId, f64> = Default::default();
    {
        let mut sums: std::collections::HashMap<SectionId, (f64, usize)> = Default::default();
        for s in &students {
            let e = sums.entry(s.record.assigned_section).or_insert((0.0, 0));
            e.0 += s.record.baseline;
            e.1 += 1;
        }
        for (sec, (sum, n)) in sums {
            section_mean_baseline.insert(sec, sum / n as f64);
        }
    }

    let mut teacher_cursor = 0usize;
    let mut section_cursor = 0u32;
    for block in &blocks {
        let n = config.classrooms_per_block;
        let block_teachers: Vec<usize> = (teacher_cursor..teacher_cursor + n).collect();
        teacher_cursor += n;
        let block_section_ids: Vec<SectionId> = (section_cursor..section_cursor + n as u32)
            .map(SectionId)
            .collect();
        section_cursor += n as u32;

        let mut perm: Vec<usize> = (0..n).collect();
        if config.assignment_bias > 0.0 {
            // Rank sections by mean baseline and teachers by a noisy practice
            // key; pairing the two orders plants the balance violation.
            let mut sec_order: Vec<usize> = (0..n).collect();
            sec_order.sort_by(|&a, &b| {
                section_mean_baseline[&block_section_ids[a]]
                    .total_cmp(&section_mean_baseline[&block_section_ids[b]])
            });
            let mut teach_keys: Vec<(f64, usize)> = block_teachers
                .iter()
                .enumerate()
                .map(|(j, &t)| {
                    let noise: f64 = std_normal.sample(rng);
                    (
                        config.assignment_bias * teachers[t].record.practice
                            + (1.0 - config.assignment_bias) * noise,
                        j,
                    )
                })
                .collect();
            teach_keys.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for (rank, &(_, j)) in teach_keys.iter().enumerate() {
                perm[sec_order[rank]] = j;
            }
        } else {
            perm.shuffle(rng);
        }

        for (slot, &section) in block_section_ids.iter().enumerate() {
            let teacher = teachers[block_teachers[perm[slot]]].record.id;
            sections.push(Section {
                id: section,
                block: block.id,
                assigned_teacher: teacher,
                realized_teacher: teacher,
            });
        }
    }

    Ok(Dataset {
        students,
        teachers,
        sections,
        blocks,
    })
}

fn sample_categorical(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Apply teacher and student non-compliance to the assigned links.
///
/// Changes links only; outcomes are computed from the realized links at
/// generation time. In the default mode every deviation is drawn
/// independently of latent quality, ability, and observed attributes; in
/// endogenous mode deviations are keyed to the latent terms with the
/// configured strength. Teacher deviations are within-block derangements of
/// an independently flagged subset, with the flag probability calibrated so
/// the expected fraction of moved teachers matches the configured rate.
pub fn apply_noncompliance(
    dataset: &Dataset,
    config: &PopulationConfig,
) -> Result<Dataset, SynthError> {
    config.validate()?;
    let mut out = dataset.clone();
    let mut rng = stream_rng(config.seed, STREAM_NONCOMPLIANCE);

    // Teacher swaps.
    if config.noncompliance_teachers > 0.0 {
        let mut by_block: std::collections::BTreeMap<BlockId, Vec<usize>> = Default::default();
        for (i, sec) in out.sections.iter().enumerate() {
            by_block.entry(sec.block).or_default().push(i);
        }
        let mut flag_prob_cache: std::collections::HashMap<usize, f64> = Default::default();
        for (_, section_idxs) in by_block {
            let flag_prob = *flag_prob_cache
                .entry(section_idxs.len())
                .or_insert_with(|| {
                    calibrate_flag_probability(section_idxs.len(), config.noncompliance_teachers)
                });
            let flagged: Vec<usize> = section_idxs
                .iter()
                .copied()
                .filter(|_| rng.random::<f64>() < flag_prob)
                .collect();
            if flagged.len() < 2 {
                continue;
            }
            let perm = if let Some(endo) = config.endogenous {
                endogenous_teacher_matching(&out, &flagged, endo.strength, &mut rng)
            } else {
                random_derangement(flagged.len(), &mut rng)
            };
            let teachers_before: Vec<TeacherId> = flagged
                .iter()
                .map(|&i| out.sections[i].realized_teacher)
                .collect();
            for (slot, &i) in flagged.iter().enumerate() {
                out.sections[i].realized_teacher = teachers_before[perm[slot]];
            }
        }
    }

    // Student moves to another section in the same block.
    if config.noncompliance_students > 0.0 {
        let mut sections_by_block: std::collections::BTreeMap<BlockId, Vec<SectionId>> =
            Default::default();
        for sec in &out.sections {
            sections_by_block.entry(sec.block).or_default().push(sec.id);
        }
        let practice_of: std::collections::HashMap<SectionId, f64> = out
            .sections
            .iter()
            .map(|sec| {
                let t = out
                    .teachers
                    .iter()
                    .find(|t| t.record.id == sec.assigned_teacher)
                    .expect("assigned teacher exists");
                (sec.id, t.record.practice)
            })
            .collect();
        for student in &mut out.students {
            if rng.random::<f64>() >= config.noncompliance_students {
                continue;
            }
            let others: Vec<SectionId> = sections_by_block[&student.record.block]
                .iter()
                .copied()
                .filter(|&s| s != student.record.assigned_section)
                .collect();
            if others.is_empty() {
                continue;
            }
            let dest = if let Some(endo) = config.endogenous {
                // Violation on purpose: among flagged students, whether one
                // acts depends on latent ability, and the dependence is
                // steeper for students with higher baseline scores; movers
                // then seek sections whose assigned teacher has a high
                // practice score. The baseline scaling makes the selection
                // differ across student types.
                let v = student.oracle.as_ref().map_or(0.0, |o| o.latent_v);
                let steepness = endo.strength * student.record.baseline.max(0.0);
                let gate = 1.0 / (1.0 + (-steepness * v).exp());
                if rng.random::<f64>() >= gate {
                    continue;
                }
                let weights: Vec<f64> = others
                    .iter()
                    .map(|s| (endo.strength * practice_of[s]).exp())
                    .collect();
                let total: f64 = weights.iter().sum();
                let mut u = rng.random::<f64>() * total;
                let mut chosen = others[others.len() - 1];
                for (s, w) in others.iter().zip(&weights) {
                    if u < *w {
                        chosen = *s;
                        break;
                    }
                    u -= w;
                }
                chosen
            } else {
                others[rng.random_range(0..others.len())]
            };
            student.record.realized_section = dest;
        }
    }

    Ok(out)
}

/// Flag probability such that a per-block independent flagging followed by a
/// derangement of the flagged subset moves the target fraction of teachers
/// in expectation. Solved by bisection on the binomial expectation
/// `E[moved]/n = sum_{j>=2} C(n,j) p^j (1-p)^{n-j} j/n`.
fn calibrate_flag_probability(n: usize, target: f64) -> f64 {
    if target <= 0.0 {
        return 0.0;
    }
    if target >= 1.0 {
        return 1.0;
    }
    let moved_fraction = |p: f64| -> f64 {
        let mut acc = 0.0;
        for j in 2..=n {
            acc += binomial_pmf(n, j, p) * j as f64;
        }
        acc / n as f64
    };
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if moved_fraction(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn binomial_pmf(n: usize, j: usize, p: f64) -> f64 {
    let mut c = 1.0;
    for i in 0..j {
        c *= (n - i) as f64 / (i + 1) as f64;
    }
    c * p.powi(j as i32) * (1.0 - p).powi((n - j) as i32)
}

/// Uniform random derangement by rejection; n is tiny (block size).
fn random_derangement(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    debug_assert!(n >= 2);
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().all(|(i, &p)| p != i) {
            return perm;
        }
    }
}

/// Endogenous teacher deviations: flagged teachers are matched to flagged
/// sections assortatively on (latent quality, section mean assigned-peer
/// baseline), with noise shrinking as strength grows.
fn endogenous_teacher_matching(
    ds: &Dataset,
    flagged_sections: &[usize],
    strength: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let n = flagged_sections.len();
    let mut mean_baseline = vec![0.0; n];
    for (slot, &si) in flagged_sections.iter().enumerate() {
        let sec = &ds.sections[si];
        let (mut sum, mut count) = (0.0, 0usize);
        for s in &ds.students {
            if s.record.assigned_section == sec.id {
                sum += s.record.baseline;
                count += 1;
            }
        }
        mean_baseline[slot] = if count > 0 { sum / count as f64 } else { 0.0 };
    }
    let quality: Vec<f64> = flagged_sections
        .iter()
        .map(|&si| {
            let sec = &ds.sections[si];
            ds.teachers
                .iter()
                .find(|t| t.record.id == sec.realized_teacher)
                .and_then(|t| t.oracle.as_ref().map(|o| o.latent_u))
                .unwrap_or(0.0)
        })
        .collect();

    let mut sec_order: Vec<usize> = (0..n).collect();
    sec_order.sort_by(|&a, &b| {
        mean_baseline[a]
            .total_cmp(&mean_baseline[b])
            .then(a.cmp(&b))
    });
    let mut teach_keys: Vec<(f64, usize)> = (0..n)
        .map(|slot| {
            let noise: f64 = StandardNormal.sample(rng);
            (
                strength * quality[slot] + (1.0 - strength.min(1.0)) * noise,
                slot,
            )
        })
        .collect();
    teach_keys.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut perm = vec![0usize; n];
    for (rank, &(_, teacher_slot)) in teach_keys.iter().enumerate() {
        perm[sec_order[rank]] = teacher_slot;
    }
    perm
}

fn apply_attrition(dataset: &mut Dataset, config: &PopulationConfig) {
    if config.attrition <= 0.0 {
        return;
    }
    let mut rng = stream_rng(config.seed, STREAM_ATTRITION);
    dataset
        .students
        .retain(|_| rng.random::<f64>() >= config.attrition);
}

/// Compute (or refresh) outcomes from the production function, using
/// realized links, realized leave-own-out peer terms, and the stored
/// latent draws. Requires oracle fields.
fn recompute_outcomes(dataset: &mut Dataset, params: &ProductionParams, config: &PopulationConfig) {
    let rosters = dataset.realized_rosters();
    let teacher_of: std::collections::HashMap<SectionId, TeacherId> = dataset
        .sections
        .iter()
        .map(|s| (s.id, s.realized_teacher))
        .collect();
    let teacher_info: std::collections::HashMap<TeacherId, (usize, f64)> = dataset
        .teachers
        .iter()
        .map(|t| {
            let o = t.oracle.as_ref().expect("oracle present during generation");
            (t.record.id, (o.true_level, o.latent_u))
        })
        .collect();

    let mut outcomes = vec![f64::NAN; dataset.students.len()];
    for (&section, roster) in &rosters {
        let teacher = teacher_of[&section];
        let (level, latent_u) = teacher_info[&teacher];
        for &i in roster {
            let me = &dataset.students[i];
            let my_oracle = me.oracle.as_ref().expect("oracle present");
            let mut counts = vec![0usize; config.k];
            let mut v_sum = 0.0;
            let mut n_peers = 0usize;
            for &j in roster {
                if j == i {
                    continue;
                }
                let peer = dataset.students[j].oracle.as_ref().expect("oracle present");
                counts[peer.true_type] += 1;
                v_sum += peer.latent_v;
                n_peers += 1;
            }
            // Singleton realized rosters have no peer terms; they are
            // excluded downstream by the design stage anyway.
            let (peer_fracs, vbar) = if n_peers == 0 {
                (vec![0.0; config.k - 1], 0.0)
            } else {
                (
                    counts[1..]
                        .iter()
                        .map(|&c| c as f64 / n_peers as f64)
                        .collect(),
                    v_sum / n_peers as f64,
                )
            };
            outcomes[i] = production_outcome(
                params,
                my_oracle.true_type,
                &peer_fracs,
                level,
                my_oracle.latent_v,
                vbar,
                latent_u,
            );
        }
    }
    for (s, y) in dataset.students.iter_mut().zip(outcomes) {
        s.record.outcome = y;
    }
}
