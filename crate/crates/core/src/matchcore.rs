//! Discrete-type matching core for toy populations.
//!
//! Everything here works on small, exactly specified populations: the joint
//! density of (own type, peer composition), feasibility of counterfactual
//! teacher-assignment rules, and the implied average outcome under a rule.
//! Probabilities and peer fractions are kept as exact rationals so that
//! golden-value checks need no floating-point tolerance; values cross to
//! `f64` only at the outcome-averaging boundary.

use std::collections::BTreeMap;

use num_rational::Ratio;
use num_traits::{ToPrimitive, Zero};
use thiserror::Error;

/// Exact probability / fraction type used throughout the module.
pub type Rational = Ratio<i64>;

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("population has no classroom compositions")]
    EmptyCompositions,
    #[error("composition {index} has {found} students, expected class size {expected}")]
    CompositionSize {
        index: usize,
        found: usize,
        expected: usize,
    },
    #[error("composition {index} contains student type {found}, but only {n_types} types exist")]
    TypeOutOfRange {
        index: usize,
        found: usize,
        n_types: usize,
    },
    #[error("{what} must sum to 1, got {got}")]
    ProbabilitySum { what: &'static str, got: Rational },
    #[error("{what} contains an entry outside [0, 1]")]
    EntryOutOfRange { what: &'static str },
    #[error("rule has {found} teacher levels but the marginal has {expected}")]
    LevelMismatch { found: usize, expected: usize },
    #[error("rule is missing a row for support point {0}")]
    MissingRuleRow(String),
    #[error("surface is missing a value for ({point}, level {level})")]
    MissingSurfaceCell { point: String, level: usize },
    #[error("rule violates the feasibility condition (max violation {max_violation})")]
    InfeasibleRule { max_violation: f64 },
    #[error("class size must be at least 2 for peer fractions to exist")]
    ClassTooSmall,
}

/// One point of the own/peer-type support: a student's own type together
/// with the leave-own-out fractions of peers in each non-reference type.
///
/// `peer_fractions[c - 1]` is the fraction of peers of type `c`, for
/// `c = 1, ..., K-1`; type 0 is the omitted reference category.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SupportPoint {
    pub own_type: usize,
    pub peer_fractions: Vec<Rational>,
}

impl std::fmt::Display for SupportPoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let peers: Vec<String> = self.peer_fractions.iter().map(|r| r.to_string()).collect();
        write!(f, "(x={}, x\u{0304}=[{}])", self.own_type, peers.join(", "))
    }
}

/// A finite population of equally sized classrooms, described by the
/// relative frequency of each classroom composition and the marginal
/// distribution of teacher levels.
#[derive(Debug, Clone)]
pub struct ToyPopulation {
    compositions: Vec<(Vec<usize>, Rational)>,
    teacher_marginal: Vec<Rational>,
    class_size: usize,
    n_student_types: usize,
}

impl ToyPopulation {
    /// Build and validate a toy population.
    ///
    /// `compositions` lists (multiset of student types, classroom probability)
    /// pairs; every multiset must have exactly `class_size` entries drawn from
    /// `0..n_student_types`. Both the composition probabilities and
    /// `teacher_marginal` must sum to one exactly.
    pub fn new(
        compositions: Vec<(Vec<usize>, Rational)>,
        teacher_marginal: Vec<Rational>,
        class_size: usize,
        n_student_types: usize,
    ) -> Result<Self, MatchError> {
        if compositions.is_empty() {
            return Err(MatchError::EmptyCompositions);
        }
        if class_size < 2 {
            return Err(MatchError::ClassTooSmall);
        }
        let mut total = Rational::zero();
        for (index, (types, prob)) in compositions.iter().enumerate() {
            if types.len() != class_size {
                return Err(MatchError::CompositionSize {
                    index,
                    found: types.len(),
                    expected: class_size,
                });
            }
            if let Some(&bad) = types.iter().find(|&&t| t >= n_student_types) {
                return Err(MatchError::TypeOutOfRange {
                    index,
                    found: bad,
                    n_types: n_student_types,
                });
            }
            if *prob < Rational::zero() || *prob > Rational::from_integer(1) {
                return Err(MatchError::EntryOutOfRange {
                    what: "composition probabilities",
                });
            }
            total += prob;
        }
        if total != Rational::from_integer(1) {
            return Err(MatchError::ProbabilitySum {
                what: "composition probabilities",
                got: total,
            });
        }
        let mut wsum = Rational::zero();
        for w in &teacher_marginal {
            if *w < Rational::zero() || *w > Rational::from_integer(1) {
                return Err(MatchError::EntryOutOfRange {
                    what: "teacher marginal",
                });
            }
            wsum += w;
        }
        if wsum != Rational::from_integer(1) {
            return Err(MatchError::ProbabilitySum {
                what: "teacher marginal",
                got: wsum,
            });
        }
        Ok(Self {
            compositions,
            teacher_marginal,
            class_size,
            n_student_types,
        })
    }

    pub fn class_size(&self) -> usize {
        self.class_size
    }

    pub fn n_student_types(&self) -> usize {
        self.n_student_types
    }

    pub fn n_teacher_levels(&self) -> usize {
        self.teacher_marginal.len()
    }

    pub fn teacher_marginal(&self) -> &[Rational] {
        &self.teacher_marginal
    }

    pub fn compositions(&self) -> &[(Vec<usize>, Rational)] {
        &self.compositions
    }

    /// Support points generated by one classroom composition, with the
    /// per-slot student mass each contributes.
    fn composition_points(&self, types: &[usize]) -> Vec<SupportPoint> {
        let denom = (self.class_size - 1) as i64;
        types
            .iter()
            .enumerate()
            .map(|(slot, &own)| {
                let mut counts = vec![0i64; self.n_student_types];
                for (j, &t) in types.iter().enumerate() {
                    if j != slot {
                        counts[t] += 1;
                    }
                }
                let peer_fractions = counts[1..]
                    .iter()
                    .map(|&c| Rational::new(c, denom))
                    .collect();
                SupportPoint {
                    own_type: own,
                    peer_fractions,
                }
            })
            .collect()
    }
}

/// Joint density of (own type, leave-own-out peer fractions) over students.
#[derive(Debug, Clone)]
pub struct OwnPeerDensity {
    mass: BTreeMap<SupportPoint, Rational>,
}

impl OwnPeerDensity {
    pub fn mass(&self, point: &SupportPoint) -> Option<Rational> {
        self.mass.get(point).copied()
    }

    pub fn points(&self) -> impl Iterator<Item = (&SupportPoint, Rational)> {
        self.mass.iter().map(|(p, &m)| (p, m))
    }

    pub fn len(&self) -> usize {
        self.mass.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mass.is_empty()
    }

    pub fn total_mass(&self) -> Rational {
        self.mass.values().copied().sum()
    }
}

/// Student-level joint density of own type and peer composition implied by
/// the classroom compositions: every slot of every composition contributes
/// `composition probability / class size`, aggregated over identical
/// support points.
pub fn own_peer_density(pop: &ToyPopulation) -> Result<OwnPeerDensity, MatchError> {
    if pop.compositions.is_empty() {
        return Err(MatchError::EmptyCompositions);
    }
    let slot_weight = Rational::new(1, pop.class_size as i64);
    let mut mass: BTreeMap<SupportPoint, Rational> = BTreeMap::new();
    for (types, prob) in &pop.compositions {
        for point in pop.composition_points(types) {
            *mass.entry(point).or_insert_with(Rational::zero) += prob * slot_weight;
        }
    }
    Ok(OwnPeerDensity { mass })
}

/// A counterfactual teacher-assignment rule: for every support point, a
/// probability vector over teacher levels.
#[derive(Debug, Clone)]
pub struct CounterfactualRule {
    rows: BTreeMap<SupportPoint, Vec<Rational>>,
    n_levels: usize,
}

impl CounterfactualRule {
    /// Build a rule from explicit per-point rows. Every row must be a
    /// probability vector of length `n_levels`.
    pub fn new(
        rows: BTreeMap<SupportPoint, Vec<Rational>>,
        n_levels: usize,
    ) -> Result<Self, MatchError> {
        for row in rows.values() {
            if row.len() != n_levels {
                return Err(MatchError::LevelMismatch {
                    found: row.len(),
                    expected: n_levels,
                });
            }
            let mut sum = Rational::zero();
            for p in row {
                if *p < Rational::zero() || *p > Rational::from_integer(1) {
                    return Err(MatchError::EntryOutOfRange { what: "rule rows" });
                }
                sum += p;
            }
            if sum != Rational::from_integer(1) {
                return Err(MatchError::ProbabilitySum {
                    what: "rule rows",
                    got: sum,
                });
            }
        }
        Ok(Self { rows, n_levels })
    }

    /// The rule that assigns every support point the status-quo marginal:
    /// random assignment of teachers to classrooms.
    pub fn constant_marginal(
        density: &OwnPeerDensity,
        marginal: &[Rational],
    ) -> Result<Self, MatchError> {
        let rows = density
            .points()
            .map(|(p, _)| (p.clone(), marginal.to_vec()))
            .collect();
        Self::new(rows, marginal.len())
    }

    /// Classroom-level rows keyed by composition index: every support point
    /// of composition `c` receives row `per_composition[c]`.
    ///
    /// Because a support point determines its classroom composition (own type
    /// plus peer multiset reconstruct the class multiset), rows from distinct
    /// compositions never collide.
    pub fn from_classroom_rows(
        pop: &ToyPopulation,
        per_composition: &[Vec<Rational>],
    ) -> Result<Self, MatchError> {
        if per_composition.len() != pop.compositions.len() {
            return Err(MatchError::LevelMismatch {
                found: per_composition.len(),
                expected: pop.compositions.len(),
            });
        }
        let mut rows = BTreeMap::new();
        for ((types, _), row) in pop.compositions.iter().zip(per_composition) {
            for point in pop.composition_points(types) {
                rows.insert(point, row.clone());
            }
        }
        Self::new(rows, pop.n_teacher_levels())
    }

    /// Deterministic classroom-level rule: composition `c` is assigned
    /// teacher level `assignment[c]` with probability one. This is the only
    /// way the module constructs deterministic rules, which rules out
    /// assigning different teachers to students of the same classroom.
    pub fn classroom_deterministic(
        pop: &ToyPopulation,
        assignment: &[usize],
    ) -> Result<Self, MatchError> {
        let n_levels = pop.n_teacher_levels();
        let rows: Vec<Vec<Rational>> = assignment
            .iter()
            .map(|&w| {
                let mut row = vec![Rational::zero(); n_levels];
                if w < n_levels {
                    row[w] = Rational::from_integer(1);
                }
                row
            })
            .collect();
        for (&w, _) in assignment.iter().zip(&rows) {
            if w >= n_levels {
                return Err(MatchError::LevelMismatch {
                    found: w,
                    expected: n_levels,
                });
            }
        }
        Self::from_classroom_rows(pop, &rows)
    }

    pub fn row(&self, point: &SupportPoint) -> Option<&[Rational]> {
        self.rows.get(point).map(|r| r.as_slice())
    }

    pub fn n_levels(&self) -> usize {
        self.n_levels
    }
}

/// Result of a feasibility check: whether the rule preserves the teacher
/// marginal, and the largest absolute violation found.
#[derive(Debug, Clone, Copy)]
pub struct Feasibility {
    pub feasible: bool,
    pub max_violation: f64,
}

/// Tolerance used when declaring a rule feasible. Exact rational inputs
/// produce violations of exactly zero.
pub const FEASIBILITY_TOL: f64 = 1e-10;

/// Checks that integrating the rule against the own/peer density reproduces
/// the teacher marginal at every level.
pub fn check_feasible(
    rule: &CounterfactualRule,
    density: &OwnPeerDensity,
    marginal: &[Rational],
) -> Result<Feasibility, MatchError> {
    if rule.n_levels != marginal.len() {
        return Err(MatchError::LevelMismatch {
            found: rule.n_levels,
            expected: marginal.len(),
        });
    }
    let mut implied = vec![Rational::zero(); marginal.len()];
    for (point, mass) in density.points() {
        let row = rule
            .row(point)
            .ok_or_else(|| MatchError::MissingRuleRow(point.to_string()))?;
        for (acc, p) in implied.iter_mut().zip(row) {
            *acc += p * mass;
        }
    }
    let mut max_violation = Rational::zero();
    for (got, want) in implied.iter().zip(marginal) {
        let diff = if got >= want { got - want } else { want - got };
        if diff > max_violation {
            max_violation = diff;
        }
    }
    let max_violation_f = max_violation.to_f64().unwrap_or(f64::INFINITY);
    Ok(Feasibility {
        feasible: max_violation_f <= FEASIBILITY_TOL,
        max_violation: max_violation_f,
    })
}

/// Expected outcomes on the product of a density's support and the teacher
/// levels: the average outcome for students of a given type/peer mix when
/// taught by a given teacher level.
#[derive(Debug, Clone)]
pub struct MatchSurface {
    values: BTreeMap<(SupportPoint, usize), f64>,
    n_levels: usize,
}

impl MatchSurface {
    pub fn new(values: BTreeMap<(SupportPoint, usize), f64>, n_levels: usize) -> Self {
        Self { values, n_levels }
    }

    /// Tabulate a function over the full support × level grid.
    pub fn from_fn<F>(density: &OwnPeerDensity, n_levels: usize, f: F) -> Self
    where
        F: Fn(&SupportPoint, usize) -> f64,
    {
        let mut values = BTreeMap::new();
        for (point, _) in density.points() {
            for w in 0..n_levels {
                values.insert((point.clone(), w), f(point, w));
            }
        }
        Self { values, n_levels }
    }

    pub fn value(&self, point: &SupportPoint, level: usize) -> Option<f64> {
        self.values.get(&(point.clone(), level)).copied()
    }

    pub fn n_levels(&self) -> usize {
        self.n_levels
    }

    pub fn min_value(&self) -> f64 {
        self.values.values().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.values
            .values()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Average outcome under a feasible counterfactual rule:
/// sum over the support of `[sum_w m(x, x̄, w) f̃(w | x, x̄)] f(x, x̄)`.
///
/// The rule is re-checked for feasibility; an infeasible rule is an error
/// rather than a silently extrapolated number.
pub fn are_nonparametric(
    surface: &MatchSurface,
    rule: &CounterfactualRule,
    density: &OwnPeerDensity,
) -> Result<f64, MatchError> {
    let marginal_len = rule.n_levels;
    if surface.n_levels != marginal_len {
        return Err(MatchError::LevelMismatch {
            found: surface.n_levels,
            expected: marginal_len,
        });
    }
    let mut total = 0.0f64;
    for (point, mass) in density.points() {
        let row = rule
            .row(point)
            .ok_or_else(|| MatchError::MissingRuleRow(point.to_string()))?;
        for (w, p) in row.iter().enumerate() {
            if p.is_zero() {
                continue;
            }
            let m = surface
                .value(point, w)
                .ok_or_else(|| MatchError::MissingSurfaceCell {
                    point: point.to_string(),
                    level: w,
                })?;
            let weight = (p * mass).to_f64().unwrap_or(0.0);
            total += m * weight;
        }
    }
    Ok(total)
}

/// Checked variant of [`are_nonparametric`] that enforces the feasibility
/// precondition against the given marginal.
pub fn are_nonparametric_checked(
    surface: &MatchSurface,
    rule: &CounterfactualRule,
    density: &OwnPeerDensity,
    marginal: &[Rational],
) -> Result<f64, MatchError> {
    let feas = check_feasible(rule, density, marginal)?;
    if !feas.feasible {
        return Err(MatchError::InfeasibleRule {
            max_violation: feas.max_violation,
        });
    }
    are_nonparametric(surface, rule, density)
}

/// Enumerate every feasible deterministic classroom-level assignment:
/// maps from composition index to teacher level whose induced classroom
/// shares reproduce the teacher marginal exactly.
///
/// Intended for small instances; the search space is `L^(#compositions)`.
pub fn enumerate_deterministic_rules(
    pop: &ToyPopulation,
) -> Result<Vec<(Vec<usize>, CounterfactualRule)>, MatchError> {
    let n_comps = pop.compositions.len();
    let n_levels = pop.n_teacher_levels();
    let mut out = Vec::new();
    let mut assignment = vec![0usize; n_comps];
    loop {
        let mut shares = vec![Rational::zero(); n_levels];
        for (c, &w) in assignment.iter().enumerate() {
            shares[w] += pop.compositions[c].1;
        }
        if shares
            .iter()
            .zip(&pop.teacher_marginal)
            .all(|(got, want)| got == want)
        {
            let rule = CounterfactualRule::classroom_deterministic(pop, &assignment)?;
            out.push((assignment.clone(), rule));
        }
        // odometer increment over L^n_comps
        let mut i = 0;
        loop {
            if i == n_comps {
                return Ok(out);
            }
            assignment[i] += 1;
            if assignment[i] < n_levels {
                break;
            }
            assignment[i] = 0;
            i += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn r(n: i64, d: i64) -> Rational {
        Rational::new(n, d)
    }

    /// Two student types, classes of three, the four compositions 000, 001,
    /// 011, 111 each with probability 1/4, and a 50/50 teacher marginal.
    fn toy_population() -> ToyPopulation {
        ToyPopulation::new(
            vec![
                (vec![0, 0, 0], r(1, 4)),
                (vec![0, 0, 1], r(1, 4)),
                (vec![0, 1, 1], r(1, 4)),
                (vec![1, 1, 1], r(1, 4)),
            ],
            vec![r(1, 2), r(1, 2)],
            3,
            2,
        )
        .unwrap()
    }

    fn point(own: usize, frac: Rational) -> SupportPoint {
        SupportPoint {
            own_type: own,
            peer_fractions: vec![frac],
        }
    }

    #[test]
    fn density_matches_reference_toy_table() {
        let density = own_peer_density(&toy_population()).unwrap();
        let expect = [
            (point(0, r(0, 1)), r(1, 4)),
            (point(0, r(1, 2)), r(1, 6)),
            (point(1, r(0, 1)), r(1, 12)),
            (point(0, r(1, 1)), r(1, 12)),
            (point(1, r(1, 2)), r(1, 6)),
            (point(1, r(1, 1)), r(1, 4)),
        ];
        assert_eq!(density.len(), 6);
        for (p, want) in expect {
            assert_eq!(density.mass(&p), Some(want), "mass at {p}");
        }
        assert_eq!(density.total_mass(), Rational::from_integer(1));
    }

    #[test]
    fn degenerate_population_has_single_point() {
        let pop = ToyPopulation::new(
            vec![(vec![0, 0], Rational::from_integer(1))],
            vec![Rational::from_integer(1)],
            2,
            2,
        )
        .unwrap();
        let density = own_peer_density(&pop).unwrap();
        assert_eq!(density.len(), 1);
        assert_eq!(
            density.mass(&point(0, r(0, 1))),
            Some(Rational::from_integer(1))
        );
    }

    #[test]
    fn two_composition_density_matches_hand_enumeration() {
        // Compositions 01 and 11 with probability 1/2 each, class size 2.
        // Slots enumerated by hand: 01 -> (0, 1) and (1, 0) each 1/4;
        // 11 -> (1, 1) twice, 1/2 total.
        let pop = ToyPopulation::new(
            vec![(vec![0, 1], r(1, 2)), (vec![1, 1], r(1, 2))],
            vec![r(1, 2), r(1, 2)],
            2,
            2,
        )
        .unwrap();
        let density = own_peer_density(&pop).unwrap();
        assert_eq!(density.mass(&point(0, r(1, 1))), Some(r(1, 4)));
        assert_eq!(density.mass(&point(1, r(0, 1))), Some(r(1, 4)));
        assert_eq!(density.mass(&point(1, r(1, 1))), Some(r(1, 2)));
    }

    #[test]
    fn empty_population_rejected() {
        let err = ToyPopulation::new(vec![], vec![r(1, 1)], 3, 2).unwrap_err();
        assert!(matches!(err, MatchError::EmptyCompositions));
    }

    #[test]
    fn constant_marginal_rule_is_feasible() {
        let pop = toy_population();
        let density = own_peer_density(&pop).unwrap();
        let rule = CounterfactualRule::constant_marginal(&density, pop.teacher_marginal()).unwrap();
        let feas = check_feasible(&rule, &density, pop.teacher_marginal()).unwrap();
        assert!(feas.feasible);
        assert_eq!(feas.max_violation, 0.0);
    }

    #[test]
    fn reference_counterfactual_rule_is_feasible() {
        // Counterfactual column of the toy table: Pr(W = 1) of 1/3, 1/2,
        // 1/2, 2/3 for compositions 000, 001, 011, 111.
        let pop = toy_population();
        let density = own_peer_density(&pop).unwrap();
        let rows = vec![
            vec![r(2, 3), r(1, 3)],
            vec![r(1, 2), r(1, 2)],
            vec![r(1, 2), r(1, 2)],
            vec![r(1, 3), r(2, 3)],
        ];
        let rule = CounterfactualRule::from_classroom_rows(&pop, &rows).unwrap();
        let feas = check_feasible(&rule, &density, pop.teacher_marginal()).unwrap();
        assert!(feas.feasible);
        assert_eq!(feas.max_violation, 0.0);
    }

    #[test]
    fn always_high_rule_is_infeasible_by_half() {
        let pop = toy_population();
        let density = own_peer_density(&pop).unwrap();
        let rows: BTreeMap<_, _> = density
            .points()
            .map(|(p, _)| (p.clone(), vec![r(0, 1), r(1, 1)]))
            .collect();
        let rule = CounterfactualRule::new(rows, 2).unwrap();
        let feas = check_feasible(&rule, &density, pop.teacher_marginal()).unwrap();
        assert!(!feas.feasible);
        assert_abs_diff_eq!(feas.max_violation, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn level_mismatch_is_an_error() {
        let pop = toy_population();
        let density = own_peer_density(&pop).unwrap();
        let rule = CounterfactualRule::constant_marginal(&density, pop.teacher_marginal()).unwrap();
        let err = check_feasible(&rule, &density, &[r(1, 1)]).unwrap_err();
        assert!(matches!(err, MatchError::LevelMismatch { .. }));
    }

    #[test]
    fn separable_surface_kills_reallocation_effects() {
        // m(x, x̄, w) = a(x, x̄) + b(w): the ARE difference between any two
        // feasible rules must vanish.
        let pop = toy_population();
        let density = own_peer_density(&pop).unwrap();
        let surface = MatchSurface::from_fn(&density, 2, |p, w| {
            let a = p.own_type as f64 + 0.25 * p.peer_fractions[0].to_f64().unwrap();
            let b = 3.0 * w as f64;
            a + b
        });
        let random =
            CounterfactualRule::constant_marginal(&density, pop.teacher_marginal()).unwrap();
        let rows = vec![
            vec![r(2, 3), r(1, 3)],
            vec![r(1, 2), r(1, 2)],
            vec![r(1, 2), r(1, 2)],
            vec![r(1, 3), r(2, 3)],
        ];
        let tilted = CounterfactualRule::from_classroom_rows(&pop, &rows).unwrap();
        let v_random = are_nonparametric(&surface, &random, &density).unwrap();
        let v_tilted = are_nonparametric(&surface, &tilted, &density).unwrap();
        assert_abs_diff_eq!(v_random, v_tilted, epsilon = 1e-12);
    }

    #[test]
    fn constant_surface_returns_constant() {
        let pop = toy_population();
        let density = own_peer_density(&pop).unwrap();
        let surface = MatchSurface::from_fn(&density, 2, |_, _| 7.5);
        let rule = CounterfactualRule::constant_marginal(&density, pop.teacher_marginal()).unwrap();
        let v = are_nonparametric(&surface, &rule, &density).unwrap();
        assert_abs_diff_eq!(v, 7.5, epsilon = 1e-12);
    }

    #[test]
    fn missing_surface_cell_is_reported() {
        let pop = toy_population();
        let density = own_peer_density(&pop).unwrap();
        let surface = MatchSurface::new(BTreeMap::new(), 2);
        let rule = CounterfactualRule::constant_marginal(&density, pop.teacher_marginal()).unwrap();
        let err = are_nonparametric(&surface, &rule, &density).unwrap_err();
        assert!(matches!(err, MatchError::MissingSurfaceCell { .. }));
    }

    #[test]
    fn multiplicative_surface_value_matches_brute_force_enumeration() {
        // m(x, x̄, w) = x * w on the toy geometry; the value under the
        // reference counterfactual rule is checked against exhaustive
        // summation over support points done by hand:
        // only (x=1, ·) rows contribute, with Pr(W=1) per composition.
        let pop = toy_population();
        let density = own_peer_density(&pop).unwrap();
        let surface = MatchSurface::from_fn(&density, 2, |p, w| (p.own_type * w) as f64);
        let rows = vec![
            vec![r(2, 3), r(1, 3)],
            vec![r(1, 2), r(1, 2)],
            vec![r(1, 2), r(1, 2)],
            vec![r(1, 3), r(2, 3)],
        ];
        let rule = CounterfactualRule::from_classroom_rows(&pop, &rows).unwrap();
        // Hand sum: f(1,0)*1/2 + f(1,1/2)*1/2 + f(1,1)*2/3
        //         = 1/12*1/2 + 1/6*1/2 + 1/4*2/3 = 1/24 + 1/12 + 1/6 = 7/24.
        let want = 7.0 / 24.0;
        let got = are_nonparametric(&surface, &rule, &density).unwrap();
        assert_abs_diff_eq!(got, want, epsilon = 1e-14);
    }

    #[test]
    fn are_bounded_by_surface_range_and_random_rule_matches_mixture() {
        let pop = toy_population();
        let density = own_peer_density(&pop).unwrap();
        let surface = MatchSurface::from_fn(&density, 2, |p, w| {
            (2 * p.own_type) as f64 - 1.5 * w as f64
                + p.peer_fractions[0].to_f64().unwrap() * (w as f64)
        });
        let random =
            CounterfactualRule::constant_marginal(&density, pop.teacher_marginal()).unwrap();
        let v = are_nonparametric(&surface, &random, &density).unwrap();
        assert!(v >= surface.min_value() - 1e-12 && v <= surface.max_value() + 1e-12);

        // Random assignment equals sum_w f(w) E[m(X, X̄, w)].
        let mut mixture = 0.0;
        for (w, fw) in pop.teacher_marginal().iter().enumerate() {
            let mut expectation = 0.0;
            for (p, mass) in density.points() {
                expectation += surface.value(p, w).unwrap() * mass.to_f64().unwrap();
            }
            mixture += fw.to_f64().unwrap() * expectation;
        }
        assert_abs_diff_eq!(v, mixture, epsilon = 1e-12);
    }

    #[test]
    fn deterministic_enumeration_matches_rule_maximum() {
        let pop = toy_population();
        let density = own_peer_density(&pop).unwrap();
        let surface = MatchSurface::from_fn(&density, 2, |p, w| {
            (p.own_type as f64) * (w as f64)
                + 0.3 * p.peer_fractions[0].to_f64().unwrap() * (w as f64)
        });
        let rules = enumerate_deterministic_rules(&pop).unwrap();
        // Choosing 2 of 4 equally likely compositions for the high level.
        assert_eq!(rules.len(), 6);
        let mut best_via_rules = f64::NEG_INFINITY;
        for (_, rule) in &rules {
            let feas = check_feasible(rule, &density, pop.teacher_marginal()).unwrap();
            assert!(feas.feasible);
            let v = are_nonparametric(&surface, rule, &density).unwrap();
            best_via_rules = best_via_rules.max(v);
        }
        // Direct classroom-level enumeration of the same six assignments.
        let mut best_direct = f64::NEG_INFINITY;
        for (assignment, _) in &rules {
            let mut v = 0.0;
            for (c, (types, prob)) in pop.compositions().iter().enumerate() {
                let w = assignment[c];
                for point in pop.composition_points(types) {
                    v += surface.value(&point, w).unwrap()
                        * (prob / Rational::from_integer(pop.class_size() as i64))
                            .to_f64()
                            .unwrap();
                }
            }
            best_direct = best_direct.max(v);
        }
        assert_abs_diff_eq!(best_via_rules, best_direct, epsilon = 1e-12);
    }

    #[test]
    fn infeasible_rule_rejected_by_checked_are() {
        let pop = toy_population();
        let density = own_peer_density(&pop).unwrap();
        let rows: BTreeMap<_, _> = density
            .points()
            .map(|(p, _)| (p.clone(), vec![r(0, 1), r(1, 1)]))
            .collect();
        let rule = CounterfactualRule::new(rows, 2).unwrap();
        let surface = MatchSurface::from_fn(&density, 2, |_, w| w as f64);
        let err = are_nonparametric_checked(&surface, &rule, &density, pop.teacher_marginal())
            .unwrap_err();
        assert!(matches!(err, MatchError::InfeasibleRule { .. }));
    }
}
