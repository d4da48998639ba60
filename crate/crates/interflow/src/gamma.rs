//! Bounded-cost transport distance between equal-size uniform empirical
//! measures, computed exactly by min-cost assignment. The cost of moving mass
//! across distance r is r / (1 + r), so the distance is always below 1.
//!
//! The concave cost rules out the sorted-matching shortcut even in one
//! dimension, so the assignment solver runs everywhere; a permutation
//! enumeration oracle covers small instances.

use crate::error::{Error, Result};
use crate::linalg;

/// Uniformly weighted atomic measure.
#[derive(Clone, Debug)]
pub struct EmpiricalMeasure {
    d: usize,
    atoms: Vec<f64>,
}

impl EmpiricalMeasure {
    pub fn new(d: usize, atoms: Vec<f64>) -> Result<EmpiricalMeasure> {
        if d == 0 || atoms.is_empty() || atoms.len() % d != 0 {
            return Err(Error::Dimension { expected: d.max(1), got: atoms.len() });
        }
        if !atoms.iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidModel("empirical measure atoms must be finite".into()));
        }
        Ok(EmpiricalMeasure { d, atoms })
    }

    pub fn from_points(points: &[Vec<f64>]) -> Result<EmpiricalMeasure> {
        let d = points.first().map(|p| p.len()).unwrap_or(0);
        let mut atoms = Vec::with_capacity(points.len() * d);
        for p in points {
            if p.len() != d {
                return Err(Error::Dimension { expected: d, got: p.len() });
            }
            atoms.extend_from_slice(p);
        }
        EmpiricalMeasure::new(d, atoms)
    }

    pub fn len(&self) -> usize {
        self.atoms.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn atom(&self, i: usize) -> &[f64] {
        &self.atoms[i * self.d..(i + 1) * self.d]
    }
}

/// Transport cost of a displacement of length `r`: `r / (1 + r)`, in [0, 1).
pub fn bounded_cost(r: f64) -> f64 {
    debug_assert!(r >= 0.0);
    r / (1.0 + r)
}

/// Distance to a Dirac: the coupling is unique, so this is the plain average
/// of per-atom costs.
pub fn gamma_to_dirac(mu: &EmpiricalMeasure, y: &[f64]) -> Result<f64> {
    if y.len() != mu.d {
        return Err(Error::Dimension { expected: mu.d, got: y.len() });
    }
    let m = mu.len();
    let mut total = 0.0;
    for i in 0..m {
        total += bounded_cost(linalg::dist(mu.atom(i), y));
    }
    Ok(total / m as f64)
}

fn cost_matrix(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Vec<Vec<f64>> {
    let m = mu.len();
    (0..m)
        .map(|i| (0..m).map(|j| bounded_cost(linalg::dist(mu.atom(i), nu.atom(j)))).collect())
        .collect()
}

fn check_pair(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<()> {
    if mu.d != nu.d {
        return Err(Error::Dimension { expected: mu.d, got: nu.d });
    }
    if mu.len() != nu.len() {
        return Err(Error::Unsupported(format!(
            "gamma between unequal atom counts ({} vs {}) is not supported",
            mu.len(),
            nu.len()
        )));
    }
    Ok(())
}

/// Exact distance between two equal-size uniform empirical measures; the
/// minimizing coupling is a permutation, found by min-cost assignment.
/// Also returns the optimal matching (atom i of `mu` to atom `match[i]` of `nu`).
pub fn gamma_empirical_with_matching(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<(f64, Vec<usize>)> {
    check_pair(mu, nu)?;
    let cost = cost_matrix(mu, nu);
    let assignment = solve_assignment(&cost);
    let m = mu.len();
    let mut total = 0.0;
    for i in 0..m {
        total += cost[i][assignment[i]];
    }
    Ok((total / m as f64, assignment))
}

pub fn gamma_empirical(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64> {
    gamma_empirical_with_matching(mu, nu).map(|(g, _)| g)
}

/// Exhaustive minimum over all permutations; oracle for `gamma_empirical`.
pub fn gamma_bruteforce(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64> {
    check_pair(mu, nu)?;
    let m = mu.len();
    if m > 8 {
        return Err(Error::Unsupported(format!("brute force limited to 8 atoms, got {m}")));
    }
    let cost = cost_matrix(mu, nu);
    let mut perm: Vec<usize> = (0..m).collect();
    let mut best = f64::INFINITY;
    permute(&mut perm, 0, &mut |p| {
        let total: f64 = p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
        if total < best {
            best = total;
        }
    });
    Ok(best / m as f64)
}

fn permute(perm: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == perm.len() {
        visit(perm);
        return;
    }
    for i in k..perm.len() {
        perm.swap(k, i);
        permute(perm, k + 1, visit);
        perm.swap(k, i);
    }
}

/// Min-cost perfect assignment on a square matrix via the potentials method,
/// O(n^3). Returns the matched column for every row.
fn solve_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let none = n;
    let mut pot_u = vec![0.0f64; n + 1];
    let mut pot_v = vec![0.0f64; n + 1];
    // matched[j] = row currently assigned to column j; index n is the virtual
    // starting column of each augmentation.
    let mut matched = vec![none; n + 1];
    let mut way = vec![none; n + 1];
    for row in 0..n {
        matched[none] = row;
        let mut j0 = none;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = none;
            for j in 0..n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0][j] - pot_u[i0] - pot_v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    pot_u[matched[j]] += delta;
                    pot_v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched[j0] == none {
                break;
            }
        }
        while j0 != none {
            let j1 = way[j0];
            matched[j0] = matched[j1];
            j0 = j1;
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 0..n {
        if matched[j] != none {
            assignment[matched[j]] = j;
        }
    }
    assignment
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn measure_1d(xs: &[f64]) -> EmpiricalMeasure {
        EmpiricalMeasure::new(1, xs.to_vec()).unwrap()
    }

    fn random_measure(rng: &mut ChaCha12Rng, d: usize, m: usize) -> EmpiricalMeasure {
        let atoms: Vec<f64> = (0..m * d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        EmpiricalMeasure::new(d, atoms).unwrap()
    }

    #[test]
    fn bounded_cost_values() {
        assert_eq!(bounded_cost(0.0), 0.0);
        assert_eq!(bounded_cost(1.0), 0.5);
        assert!(bounded_cost(1e9) > 1.0 - 1e-8);
    }

    #[test]
    fn dirac_examples() {
        let mu = measure_1d(&[1.0, 1.0, 1.0]);
        assert_eq!(gamma_to_dirac(&mu, &[1.0]).unwrap(), 0.0);
        let mu = measure_1d(&[0.0]);
        assert_eq!(gamma_to_dirac(&mu, &[1.0]).unwrap(), 0.5);
        let mu = measure_1d(&[0.0, 2.0]);
        assert!((gamma_to_dirac(&mu, &[1.0]).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn empirical_same_atoms_any_order_is_zero() {
        let mu = measure_1d(&[0.3, -1.2, 4.0]);
        let nu = measure_1d(&[4.0, 0.3, -1.2]);
        assert_eq!(gamma_empirical(&mu, &nu).unwrap(), 0.0);
    }

    #[test]
    fn empirical_two_atom_example() {
        let mu = measure_1d(&[0.0, 0.0]);
        let nu = measure_1d(&[1.0, 2.0]);
        let expected = (0.5 + 2.0 / 3.0) / 2.0;
        assert!((gamma_empirical(&mu, &nu).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn unequal_sizes_unsupported() {
        let mu = measure_1d(&[0.0]);
        let nu = measure_1d(&[0.0, 1.0]);
        assert!(matches!(gamma_empirical(&mu, &nu), Err(crate::error::Error::Unsupported(_))));
    }

    #[test]
    fn matches_bruteforce_on_random_instances() {
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        for trial in 0..50 {
            let d = rng.gen_range(1..=3);
            let m = rng.gen_range(1..=7);
            let mu = random_measure(&mut rng, d, m);
            let nu = random_measure(&mut rng, d, m);
            let fast = gamma_empirical(&mu, &nu).unwrap();
            let slow = gamma_bruteforce(&mu, &nu).unwrap();
            assert_eq!(fast, slow, "trial {trial}: assignment {fast} vs brute force {slow}");
        }
    }

    #[test]
    fn dirac_consistency_with_degenerate_measure() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mu = random_measure(&mut rng, 2, 5);
        let y = vec![0.7, -0.4];
        let mut atoms = Vec::new();
        for _ in 0..5 {
            atoms.extend_from_slice(&y);
        }
        let nu = EmpiricalMeasure::new(2, atoms).unwrap();
        let via_assignment = gamma_empirical(&mu, &nu).unwrap();
        let direct = gamma_to_dirac(&mu, &y).unwrap();
        assert_eq!(via_assignment, direct);
    }

    #[test]
    fn metric_axioms_on_random_triples() {
        let mut rng = ChaCha12Rng::seed_from_u64(2024);
        for _ in 0..100 {
            let d = rng.gen_range(1..=2);
            let m = rng.gen_range(2..=6);
            let a = random_measure(&mut rng, d, m);
            let b = random_measure(&mut rng, d, m);
            let c = random_measure(&mut rng, d, m);
            let gab = gamma_empirical(&a, &b).unwrap();
            let gba = gamma_empirical(&b, &a).unwrap();
            let gaa = gamma_empirical(&a, &a).unwrap();
            let gac = gamma_empirical(&a, &c).unwrap();
            let gbc = gamma_empirical(&b, &c).unwrap();
            assert_eq!(gaa, 0.0);
            assert!((gab - gba).abs() <= 1e-12);
            assert!(gac <= gab + gbc + 1e-12, "triangle violated: {gac} > {gab} + {gbc}");
            assert!(gab < 1.0 && gab >= 0.0);
        }
    }
}
