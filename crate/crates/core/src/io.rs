//! CSV artifacts: solutions, path bundles, PDIE grids and convergence
//! tables. Reals are written with 17 significant digits so they round-trip.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::hgen::NormRow;
use crate::levy::{Atom, PathBundle, TimeGrid};
use crate::pdie::PdieGrid;
use crate::solver::{DiscreteSolution, Representation};

fn real(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse<T: std::str::FromStr>(field: &str, what: &str, line: usize) -> Result<T> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::Io(format!("line {line}: cannot parse {what} from {field:?}")))
}

/// Writes one row per `(node, state or path, quantity)` with header
/// `node,t,index,state,quantity,value`. Quantities are `Y`, `Z` and
/// `U@<mark>`; `state` is empty for path bundles. With `max_paths` only the
/// first paths of a bundle solution are written.
pub fn write_solution<W: Write>(out: W, sol: &DiscreteSolution, max_paths: Option<usize>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["node", "t", "index", "state", "quantity", "value"])?;
    let states = sol.states();
    let width = match states {
        Some(_) => sol.width(),
        None => max_paths.map_or(sol.width(), |m| m.min(sol.width())),
    };
    let marks: Vec<String> = sol.atoms.iter().map(|a| format!("U@{}", a.mark)).collect();
    for (i, &t) in sol.grid.nodes().iter().enumerate() {
        let ts = real(t);
        let node = i.to_string();
        for k in 0..width {
            let idx = k.to_string();
            let state = states.map_or(String::new(), |s| real(s[k]));
            w.write_record([&node, &ts, &idx, &state, "Y", &real(sol.y_at(i, k))])?;
            if i < sol.zu_nodes {
                w.write_record([&node, &ts, &idx, &state, "Z", &real(sol.z_at(i, k))])?;
                for (j, q) in marks.iter().enumerate() {
                    w.write_record([&node, &ts, &idx, &state, q, &real(sol.u_at(i, k, j))])?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads the format of [`write_solution`]. The `U@<mark>` columns must
/// match the marks of `atoms`, which supply the intensities. Solutions on
/// paths come back with seed 0.
pub fn read_solution<R: Read>(input: R, atoms: &[Atom]) -> Result<DiscreteSolution> {
    let mut rd = csv::Reader::from_reader(input);
    let header = rd.headers()?.clone();
    let expected = ["node", "t", "index", "state", "quantity", "value"];
    if header.len() != expected.len() || header.iter().zip(expected).any(|(a, b)| a != b) {
        return Err(Error::Io(format!("unexpected solution header {header:?}")));
    }
    let mark_index: BTreeMap<String, usize> =
        atoms.iter().enumerate().map(|(j, a)| (format!("U@{}", a.mark), j)).collect();
    let mut times: BTreeMap<usize, f64> = BTreeMap::new();
    let mut states: BTreeMap<usize, f64> = BTreeMap::new();
    let mut lattice = None;
    let mut rows = Vec::new();
    for (n, rec) in rd.records().enumerate() {
        let rec = rec?;
        let line = n + 2;
        let node: usize = parse(&rec[0], "node", line)?;
        let t: f64 = parse(&rec[1], "t", line)?;
        let idx: usize = parse(&rec[2], "index", line)?;
        let has_state = !rec[3].trim().is_empty();
        if *lattice.get_or_insert(has_state) != has_state {
            return Err(Error::Io(format!("line {line}: state column is filled only on some rows")));
        }
        if has_state {
            states.insert(idx, parse(&rec[3], "state", line)?);
        }
        if times.insert(node, t).is_some_and(|old| old != t) {
            return Err(Error::Io(format!("line {line}: node {node} has two times")));
        }
        let q = match &rec[4] {
            "Y" => 0,
            "Z" => 1,
            other => 2 + *mark_index
                .get(other)
                .ok_or_else(|| Error::Io(format!("line {line}: unknown quantity {other:?}")))?,
        };
        let value: f64 = parse(&rec[5], "value", line)?;
        rows.push((node, idx, q, value));
    }
    if rows.is_empty() {
        return Err(Error::Io("solution file has no rows".into()));
    }
    let nodes: Vec<f64> = times.values().copied().collect();
    if times.keys().enumerate().any(|(i, &k)| i != k) {
        return Err(Error::Io("time nodes are not numbered consecutively from 0".into()));
    }
    let grid = TimeGrid::new(nodes)?;
    let width = rows.iter().map(|r| r.1).max().unwrap_or(0) + 1;
    let representation = if lattice == Some(true) {
        if states.len() != width {
            return Err(Error::Io("lattice states missing for some indices".into()));
        }
        Representation::Lattice {
            states: states.values().copied().collect(),
        }
    } else {
        Representation::Paths {
            n_paths: width,
            seed: 0,
        }
    };
    let mut sol = DiscreteSolution::zeros(grid, representation, atoms.to_vec());
    let j = atoms.len();
    let expected = sol.grid.len() * width + sol.zu_nodes * width * (1 + j);
    if rows.len() != expected {
        return Err(Error::Io(format!("expected {expected} rows, found {}", rows.len())));
    }
    for (node, idx, q, value) in rows {
        let at = node * width + idx;
        match q {
            0 => sol.y[at] = value,
            _ if node >= sol.zu_nodes => {
                return Err(Error::Io(format!("Z/U given at node {node} past the last stored node")));
            }
            1 => sol.z[at] = value,
            _ => sol.u[at * j + q - 2] = value,
        }
    }
    Ok(sol)
}

/// Header `t,path,value`.
pub fn write_paths<W: Write>(out: W, bundle: &PathBundle, max_paths: Option<usize>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "path", "value"])?;
    let n = max_paths.map_or(bundle.n_paths(), |m| m.min(bundle.n_paths()));
    for (i, &t) in bundle.grid().nodes().iter().enumerate() {
        let ts = real(t);
        for p in 0..n {
            w.write_record([ts.as_str(), &p.to_string(), &real(bundle.value(p, i))])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Header `t,v,u`.
pub fn write_pdie<W: Write>(out: W, pgrid: &PdieGrid) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "v", "u"])?;
    for (i, &t) in pgrid.grid.nodes().iter().enumerate() {
        let ts = real(t);
        for (k, &v) in pgrid.space_nodes.iter().enumerate() {
            w.write_record([ts.as_str(), &real(v), &real(pgrid.value(i, k))])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Header `n,m,dY,dZ,dU`.
pub fn write_norm_table<W: Write>(out: W, table: &[NormRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["n", "m", "dY", "dZ", "dU"])?;
    for r in table {
        w.write_record([r.n.to_string(), r.m.to_string(), real(r.dy), real(r.dz), real(r.du)])?;
    }
    w.flush()?;
    Ok(())
}
