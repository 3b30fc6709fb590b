//! Tabular import/export of datasets.
//!
//! Four comma-separated files with header rows and a deterministic column
//! order: `students.csv`, `teachers.csv`, `sections.csv`, `blocks.csv`.
//! Latent (oracle) columns are written only on request and detected from
//! the header on import.

use std::path::Path;

use thiserror::Error;

use super::{
    Block, BlockId, Dataset, DistrictId, SchoolId, SchoolType, Section, SectionId, Student,
    StudentId, StudentOracle, StudentRecord, Teacher, TeacherId, TeacherOracle, TeacherRecord,
};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{file}: {source}")]
    Csv {
        file: String,
        #[source]
        source: csv::Error,
    },
    #[error("failed to access {file}: {source}")]
    File {
        file: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file} is missing required column `{column}`")]
    MissingColumn { file: String, column: String },
    #[error("{file} row {row}: {message}")]
    BadRow {
        file: String,
        row: usize,
        message: String,
    },
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ExportOptions {
    /// Write latent/truth columns alongside the visible ones.
    pub oracle_columns: bool,
}

const STUDENT_COLS: &[&str] = &[
    "student_id",
    "district",
    "school",
    "block",
    "assigned_section",
    "realized_section",
    "baseline",
    "aux1",
    "aux2",
    "outcome",
];
const STUDENT_ORACLE_COLS: &[&str] = &["latent_v", "true_type"];

const TEACHER_COLS: &[&str] = &["teacher_id", "block", "practice", "aux1", "aux2", "aux3"];
const TEACHER_ORACLE_COLS: &[&str] = &["latent_u", "true_level"];

const SECTION_COLS: &[&str] = &[
    "section_id",
    "block",
    "assigned_teacher",
    "realized_teacher",
];
const BLOCK_COLS: &[&str] = &["block_id", "school", "district", "school_type"];

fn csv_err(file: &str) -> impl Fn(csv::Error) -> IoError + '_ {
    move |source| IoError::Csv {
        file: file.to_string(),
        source,
    }
}

/// Write the four dataset files into `dir`, creating it if needed.
pub fn export(dataset: &Dataset, dir: &Path, options: ExportOptions) -> Result<(), IoError> {
    std::fs::create_dir_all(dir).map_err(|source| IoError::File {
        file: dir.display().to_string(),
        source,
    })?;
    let oracle = options.oracle_columns;

    let path = dir.join("students.csv");
    let name = "students.csv";
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(name))?;
    let mut header: Vec<&str> = STUDENT_COLS.to_vec();
    if oracle {
        header.extend_from_slice(STUDENT_ORACLE_COLS);
    }
    w.write_record(&header).map_err(csv_err(name))?;
    for s in &dataset.students {
        let r = &s.record;
        let mut row = vec![
            r.id.0.to_string(),
            r.district.0.to_string(),
            r.school.0.to_string(),
            r.block.0.to_string(),
            r.assigned_section.0.to_string(),
            r.realized_section.0.to_string(),
            r.baseline.to_string(),
            r.aux1.to_string(),
            r.aux2.to_string(),
            r.outcome.to_string(),
        ];
        if oracle {
            match &s.oracle {
                Some(o) => {
                    row.push(o.latent_v.to_string());
                    row.push(o.true_type.to_string());
                }
                None => {
                    row.push(String::new());
                    row.push(String::new());
                }
            }
        }
        w.write_record(&row).map_err(csv_err(name))?;
    }
    w.flush().map_err(|source| IoError::File {
        file: name.to_string(),
        source,
    })?;

    let path = dir.join("teachers.csv");
    let name = "teachers.csv";
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(name))?;
    let mut header: Vec<&str> = TEACHER_COLS.to_vec();
    if oracle {
        header.extend_from_slice(TEACHER_ORACLE_COLS);
    }
    w.write_record(&header).map_err(csv_err(name))?;
    for t in &dataset.teachers {
        let r = &t.record;
        let mut row = vec![
            r.id.0.to_string(),
            r.block.0.to_string(),
            r.practice.to_string(),
            r.aux1.to_string(),
            r.aux2.map(|v| v.to_string()).unwrap_or_default(),
            r.aux3.to_string(),
        ];
        if oracle {
            match &t.oracle {
                Some(o) => {
                    row.push(o.latent_u.to_string());
                    row.push(o.true_level.to_string());
                }
                None => {
                    row.push(String::new());
                    row.push(String::new());
                }
            }
        }
        w.write_record(&row).map_err(csv_err(name))?;
    }
    w.flush().map_err(|source| IoError::File {
        file: name.to_string(),
        source,
    })?;

    let path = dir.join("sections.csv");
    let name = "sections.csv";
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(name))?;
    w.write_record(SECTION_COLS).map_err(csv_err(name))?;
    for s in &dataset.sections {
        w.write_record(&[
            s.id.0.to_string(),
            s.block.0.to_string(),
            s.assigned_teacher.0.to_string(),
            s.realized_teacher.0.to_string(),
        ])
        .map_err(csv_err(name))?;
    }
    w.flush().map_err(|source| IoError::File {
        file: name.to_string(),
        source,
    })?;

    let path = dir.join("blocks.csv");
    let name = "blocks.csv";
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(name))?;
    w.write_record(BLOCK_COLS).map_err(csv_err(name))?;
    for b in &dataset.blocks {
        w.write_record(&[
            b.id.0.to_string(),
            b.school.0.to_string(),
            b.district.0.to_string(),
            b.school_type.to_string(),
        ])
        .map_err(csv_err(name))?;
    }
    w.flush().map_err(|source| IoError::File {
        file: name.to_string(),
        source,
    })?;

    Ok(())
}

struct Table {
    file: String,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn read(dir: &Path, file: &str) -> Result<Self, IoError> {
        let path = dir.join(file);
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(&path)
            .map_err(csv_err(file))?;
        let header: Vec<String> = reader
            .headers()
            .map_err(csv_err(file))?
            .iter()
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let record = record.map_err(|source| IoError::Csv {
                file: file.to_string(),
                source,
            })?;
            if record.len() != header.len() {
                return Err(IoError::BadRow {
                    file: file.to_string(),
                    row: i + 2,
                    message: format!("expected {} fields, found {}", header.len(), record.len()),
                });
            }
            rows.push(record.iter().map(str::to_string).collect());
        }
        Ok(Self {
            file: file.to_string(),
            header,
            rows,
        })
    }

    fn column(&self, name: &str) -> Result<usize, IoError> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| IoError::MissingColumn {
                file: self.file.clone(),
                column: name.to_string(),
            })
    }

    fn optional_column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    fn parse<T: std::str::FromStr>(
        &self,
        row: usize,
        col: usize,
        what: &str,
    ) -> Result<T, IoError> {
        self.rows[row][col].parse().map_err(|_| IoError::BadRow {
            file: self.file.clone(),
            row: row + 2,
            message: format!("cannot parse `{}` as {what}", self.rows[row][col]),
        })
    }

    fn parse_optional_f64(&self, row: usize, col: usize) -> Result<Option<f64>, IoError> {
        let raw = &self.rows[row][col];
        if raw.is_empty() {
            return Ok(None);
        }
        self.parse(row, col, "a number").map(Some)
    }
}

/// Read a dataset previously written by [`export`]. Oracle columns are
/// loaded when present.
pub fn import(dir: &Path) -> Result<Dataset, IoError> {
    let students_table = Table::read(dir, "students.csv")?;
    let cols: Vec<usize> = STUDENT_COLS
        .iter()
        .map(|c| students_table.column(c))
        .collect::<Result<_, _>>()?;
    let oracle_cols: Option<(usize, usize)> = match (
        students_table.optional_column("latent_v"),
        students_table.optional_column("true_type"),
    ) {
        (Some(a), Some(b)) => Some((a, b)),
        _ => None,
    };
    let mut students = Vec::with_capacity(students_table.rows.len());
    for i in 0..students_table.rows.len() {
        let t = &students_table;
        let record = StudentRecord {
            id: StudentId(t.parse(i, cols[0], "an id")?),
            district: DistrictId(t.parse(i, cols[1], "an id")?),
            school: SchoolId(t.parse(i, cols[2], "an id")?),
            block: BlockId(t.parse(i, cols[3], "an id")?),
            assigned_section: SectionId(t.parse(i, cols[4], "an id")?),
            realized_section: SectionId(t.parse(i, cols[5], "an id")?),
            baseline: t.parse(i, cols[6], "a number")?,
            aux1: t.parse(i, cols[7], "a number")?,
            aux2: t.parse(i, cols[8], "a number")?,
            outcome: t.parse(i, cols[9], "a number")?,
        };
        let oracle = match oracle_cols {
            Some((v, ty)) if !t.rows[i][v].is_empty() => Some(StudentOracle {
                latent_v: t.parse(i, v, "a number")?,
                true_type: t.parse(i, ty, "a type label")?,
            }),
            _ => None,
        };
        students.push(Student { record, oracle });
    }

    let teachers_table = Table::read(dir, "teachers.csv")?;
    let cols: Vec<usize> = TEACHER_COLS
        .iter()
        .map(|c| teachers_table.column(c))
        .collect::<Result<_, _>>()?;
    let oracle_cols: Option<(usize, usize)> = match (
        teachers_table.optional_column("latent_u"),
        teachers_table.optional_column("true_level"),
    ) {
        (Some(a), Some(b)) => Some((a, b)),
        _ => None,
    };
    let mut teachers = Vec::with_capacity(teachers_table.rows.len());
    for i in 0..teachers_table.rows.len() {
        let t = &teachers_table;
        let record = TeacherRecord {
            id: TeacherId(t.parse(i, cols[0], "an id")?),
            block: BlockId(t.parse(i, cols[1], "an id")?),
            practice: t.parse(i, cols[2], "a number")?,
            aux1: t.parse(i, cols[3], "a number")?,
            aux2: t.parse_optional_f64(i, cols[4])?,
            aux3: t.parse(i, cols[5], "a number")?,
        };
        let oracle = match oracle_cols {
            Some((u, lv)) if !t.rows[i][u].is_empty() => Some(TeacherOracle {
                latent_u: t.parse(i, u, "a number")?,
                true_level: t.parse(i, lv, "a level label")?,
            }),
            _ => None,
        };
        teachers.push(Teacher { record, oracle });
    }

    let sections_table = Table::read(dir, "sections.csv")?;
    let cols: Vec<usize> = SECTION_COLS
        .iter()
        .map(|c| sections_table.column(c))
        .collect::<Result<_, _>>()?;
    let mut sections = Vec::with_capacity(sections_table.rows.len());
    for i in 0..sections_table.rows.len() {
        let t = &sections_table;
        sections.push(Section {
            id: SectionId(t.parse(i, cols[0], "an id")?),
            block: BlockId(t.parse(i, cols[1], "an id")?),
            assigned_teacher: TeacherId(t.parse(i, cols[2], "an id")?),
            realized_teacher: TeacherId(t.parse(i, cols[3], "an id")?),
        });
    }

    let blocks_table = Table::read(dir, "blocks.csv")?;
    let cols: Vec<usize> = BLOCK_COLS
        .iter()
        .map(|c| blocks_table.column(c))
        .collect::<Result<_, _>>()?;
    let mut blocks = Vec::with_capacity(blocks_table.rows.len());
    for i in 0..blocks_table.rows.len() {
        let t = &blocks_table;
        let school_type = match t.rows[i][cols[3]].as_str() {
            "elementary" => SchoolType::Elementary,
            "middle" => SchoolType::Middle,
            other => {
                return Err(IoError::BadRow {
                    file: t.file.clone(),
                    row: i + 2,
                    message: format!("unknown school_type `{other}`"),
                })
            }
        };
        blocks.push(Block {
            id: BlockId(t.parse(i, cols[0], "an id")?),
            school: SchoolId(t.parse(i, cols[1], "an id")?),
            district: DistrictId(t.parse(i, cols[2], "an id")?),
            school_type,
        });
    }

    Ok(Dataset {
        students,
        teachers,
        sections,
        blocks,
    })
}
