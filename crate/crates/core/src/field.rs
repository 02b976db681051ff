//! Spatially distributed hysteresis: an independent relay at every grid node.

use crate::error::{Error, Result};
use crate::relay::{BranchPair, Config, RelayState};

/// Uniform grid of `n_cells + 1` nodes on `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Grid {
    n_cells: usize,
}

impl Grid {
    pub fn new(n_cells: usize) -> Result<Self> {
        if n_cells == 0 {
            return Err(Error::InvalidParameter(
                "grid needs at least one cell".into(),
            ));
        }
        Ok(Self { n_cells })
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn n_nodes(&self) -> usize {
        self.n_cells + 1
    }

    pub fn h(&self) -> f64 {
        1.0 / self.n_cells as f64
    }

    pub fn x(&self, i: usize) -> f64 {
        i as f64 / self.n_cells as f64
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n_nodes()).map(|i| self.x(i)).collect()
    }

    /// Index of the node nearest to `x` (clamped to the domain).
    pub fn nearest(&self, x: f64) -> usize {
        let i = (x.clamp(0.0, 1.0) * self.n_cells as f64).round();
        i as usize
    }

    /// Sample `f` at every node.
    pub fn sample(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        (0..self.n_nodes()).map(|i| f(self.x(i))).collect()
    }
}

/// Per-node configuration values.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpatialConfig(pub Vec<Config>);

impl SpatialConfig {
    pub fn uniform(grid: &Grid, c: Config) -> Self {
        Self(vec![c; grid.n_nodes()])
    }

    /// Configuration 1 on `x <= abar`, 2 to the right, with `abar` snapped to the
    /// nearest node (which belongs to the left part).
    pub fn step_at(grid: &Grid, abar: f64) -> Self {
        let ia = grid.nearest(abar);
        Self(
            (0..grid.n_nodes())
                .map(|i| if i <= ia { Config::One } else { Config::Two })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `u`, `v` and relay states at one time level.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldState {
    pub t: f64,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub relays: Vec<RelayState>,
}

impl FieldState {
    pub fn configs(&self) -> SpatialConfig {
        SpatialConfig(self.relays.iter().map(|r| r.config).collect())
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }
}

/// First node where `phi` and `xi0` are inconsistent.
///
/// Inputs at or below `alpha` must start in configuration 1 and inputs at or above
/// `beta` in configuration 2, matching the initial rule of the relay; in between
/// either is allowed.
pub fn check_consistent(phi: &[f64], xi0: &SpatialConfig, branches: &BranchPair) -> Result<()> {
    if phi.len() != xi0.len() {
        return Err(Error::InvalidParameter(format!(
            "initial data has {} nodes but configuration has {}",
            phi.len(),
            xi0.len()
        )));
    }
    for (i, (&p, &c)) in phi.iter().zip(&xi0.0).enumerate() {
        let ok = if p >= branches.beta() {
            c == Config::Two
        } else if p <= branches.alpha() {
            c == Config::One
        } else {
            true
        };
        if !ok {
            return Err(Error::InconsistentInitialData { node: i });
        }
    }
    Ok(())
}

pub fn init_field(phi: &[f64], xi0: &SpatialConfig, branches: &BranchPair) -> Result<FieldState> {
    check_consistent(phi, xi0, branches)?;
    let relays: Vec<RelayState> = phi
        .iter()
        .zip(&xi0.0)
        .map(|(&p, &c)| RelayState::new(c, p, branches))
        .collect();
    let v = relays
        .iter()
        .zip(phi)
        .enumerate()
        .map(|(i, (r, &p))| r.output(p, branches).map_err(|e| e.at_node(i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(FieldState {
        t: 0.0,
        u: phi.to_vec(),
        v,
        relays,
    })
}

/// Feed `u_new` to every relay and recompute `v` at time `t_new`.
pub fn advance_field(
    state: &FieldState,
    u_new: &[f64],
    t_new: f64,
    branches: &BranchPair,
) -> Result<FieldState> {
    if u_new.len() != state.len() {
        return Err(Error::InvalidParameter(format!(
            "expected {} nodes, got {}",
            state.len(),
            u_new.len()
        )));
    }
    if !(t_new > state.t) {
        return Err(Error::InvalidParameter(format!(
            "time must increase ({} -> {t_new})",
            state.t
        )));
    }
    let relays: Vec<RelayState> = state
        .relays
        .iter()
        .zip(u_new)
        .map(|(r, &g)| r.update(g, branches))
        .collect();
    let v = relays
        .iter()
        .zip(u_new)
        .enumerate()
        .map(|(i, (r, &g))| r.output(g, branches).map_err(|e| e.at_node(i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(FieldState {
        t: t_new,
        u: u_new.to_vec(),
        v,
        relays,
    })
}

/// Snapshot rows `x, u, v, config`.
pub fn write_snapshot_csv<W: std::io::Write>(
    grid: &Grid,
    state: &FieldState,
    out: &mut W,
) -> std::io::Result<()> {
    writeln!(out, "x,u,v,config")?;
    for i in 0..state.len() {
        writeln!(
            out,
            "{},{},{},{}",
            grid.x(i),
            state.u[i],
            state.v[i],
            state.relays[i].config.index()
        )?;
    }
    Ok(())
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;

    fn unit() -> BranchPair {
        BranchPair::constant(0.0, 1.0, -1.0, 1.0).unwrap()
    }

    #[test]
    fn grid_nodes() {
        let g = Grid::new(400).unwrap();
        let x = g.nodes();
        assert_eq!(x.len(), 401);
        assert_eq!(x[0], 0.0);
        assert_eq!(x[400], 1.0);
        for w in x.windows(2) {
            assert!(((w[1] - w[0]) - g.h()).abs() <= 1e-12 * g.h());
        }
        assert!(Grid::new(0).is_err());
        assert_eq!(g.nearest(0.4), 160);
        assert_eq!(g.nearest(0.40124), 160);
        assert_eq!(g.nearest(2.0), 400);
    }

    #[test]
    fn consistency_examples() {
        let p = unit();
        let c12 = SpatialConfig(vec![Config::One, Config::Two]);
        assert!(check_consistent(&[0.5, 0.5], &c12, &p).is_ok());
        let c1 = SpatialConfig(vec![Config::One]);
        let c2 = SpatialConfig(vec![Config::Two]);
        assert!(check_consistent(&[1.5], &c2, &p).is_ok());
        assert_eq!(
            check_consistent(&[1.5], &c1, &p),
            Err(Error::InconsistentInitialData { node: 0 })
        );
        assert_eq!(
            check_consistent(&[-0.5], &c2, &p),
            Err(Error::InconsistentInitialData { node: 0 })
        );
        assert!(check_consistent(&[-0.5], &c1, &p).is_ok());
        assert!(matches!(
            check_consistent(&[0.5], &c12, &p),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn init_prototype_uses_left_and_right_branches() {
        let p = BranchPair::cubic();
        let g = Grid::new(100).unwrap();
        let phi = g.sample(|x| p.alpha() + 0.6 * (x - 0.4));
        let xi0 = SpatialConfig::step_at(&g, 0.4);
        let s = init_field(&phi, &xi0, &p).unwrap();
        for i in 0..g.n_nodes() {
            let expected = if i <= 40 {
                p.h1(phi[i]).unwrap()
            } else {
                p.h2(phi[i]).unwrap()
            };
            assert_eq!(s.v[i], expected, "node {i}");
        }
        assert_eq!(s.t, 0.0);
    }

    #[test]
    fn init_above_beta_starts_in_two() {
        let p = unit();
        let phi = vec![1.0, 1.5, 3.0];
        let s = init_field(&phi, &SpatialConfig(vec![Config::Two; 3]), &p).unwrap();
        assert!(s.relays.iter().all(|r| r.config == Config::Two));
        let mixed = SpatialConfig(vec![Config::Two, Config::One, Config::Two]);
        assert!(init_field(&phi, &mixed, &p).is_err());
        assert_eq!(s.v, vec![1.0; 3]);
    }

    #[test]
    fn init_inside_band_keeps_configuration() {
        let p = unit();
        let phi = vec![0.2, 0.5, 0.9];
        let s = init_field(&phi, &SpatialConfig(vec![Config::One; 3]), &p).unwrap();
        assert_eq!(s.v, vec![-1.0; 3]);
        let bad = init_field(&[2.0], &SpatialConfig(vec![Config::One]), &p);
        assert!(matches!(
            bad,
            Err(Error::InconsistentInitialData { node: 0 })
        ));
    }

    #[test]
    fn advance_examples() {
        let p = unit();
        let phi = vec![0.5, 0.5, 0.5];
        let s = init_field(&phi, &SpatialConfig(vec![Config::One; 3]), &p).unwrap();

        let same = advance_field(&s, &s.u, 0.1, &p).unwrap();
        assert_eq!(same.v, s.v);
        assert_eq!(same.t, 0.1);

        let one_up = advance_field(&s, &[0.5, 1.2, 0.5], 0.1, &p).unwrap();
        assert_eq!(
            one_up.configs().0,
            vec![Config::One, Config::Two, Config::One]
        );

        let s2 = init_field(&phi, &SpatialConfig(vec![Config::Two; 3]), &p).unwrap();
        let down = advance_field(&s2, &[-0.1, -0.2, 0.0], 0.1, &p).unwrap();
        assert!(down.relays.iter().all(|r| r.config == Config::One));
        assert!(advance_field(&s2, &phi, 0.0, &p).is_err());
    }

    #[test]
    fn advance_is_pointwise_relay_update() {
        let p = BranchPair::cubic();
        let g = Grid::new(20).unwrap();
        let phi = g.sample(|x| 0.3 * (6.0 * x).sin());
        let xi0 = SpatialConfig::step_at(&g, 0.5);
        let s = init_field(&phi, &xi0, &p).unwrap();
        let u_new = g.sample(|x| 0.5 * (6.0 * x).cos());
        let next = advance_field(&s, &u_new, 0.5, &p).unwrap();
        for i in 0..g.n_nodes() {
            let r = s.relays[i].update(u_new[i], &p);
            assert_eq!(next.relays[i], r);
            assert_eq!(next.v[i], r.output(u_new[i], &p).unwrap());
        }
    }

    #[test]
    fn snapshot_csv_layout() {
        let p = unit();
        let g = Grid::new(2).unwrap();
        let s = init_field(&[0.5, 0.5, 0.5], &SpatialConfig::step_at(&g, 0.5), &p).unwrap();
        let mut buf = Vec::new();
        write_snapshot_csv(&g, &s, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "x,u,v,config\n0,0.5,-1,1\n0.5,0.5,-1,1\n1,0.5,1,2\n");
    }
}
