/**
 * CSV loading and series extraction for convergence runs.
 *
 * The input is the versioned convergence.csv written by `ajn run`:
 *
 *   step,n_elements,n_dofs,eta,marked,increment_energy,ref_error
 *
 * increment_energy and ref_error are squared energy quantities; the
 * increment in row l is |u_{l+1} - u_l|^2 (empty on the final row) and
 * ref_error in row l is |u_ref - u_l|^2 against the last iterate.
 */

export const CSV_COLUMNS = [
  "step",
  "n_elements",
  "n_dofs",
  "eta",
  "marked",
  "increment_energy",
  "ref_error",
];

export type SeriesName = "eta" | "ref_error" | "qo_ratio";

export const SERIES_NAMES: SeriesName[] = ["eta", "ref_error", "qo_ratio"];

/** Anything wrong with the inputs (bad CSV, bad flags, empty selection). */
export class InputError extends Error {}

export interface RunTable {
  path: string;
  rows: Record<string, string>[];
}

export interface SeriesPoints {
  /** x values: n_dofs */
  n: number[];
  /** y values, all positive (log-log plot) */
  v: number[];
}

export function parseCsv(text: string, path: string): RunTable {
  const lines = text.trim().split("\n");
  if (lines.length === 0 || lines[0].trim() === "") {
    throw new InputError(`${path}: empty CSV`);
  }
  const header = lines[0].trim().split(",");
  for (const col of CSV_COLUMNS) {
    if (!header.includes(col)) {
      throw new InputError(`${path}: missing column "${col}"`);
    }
  }
  const rows = lines.slice(1).map((line) => {
    const parts = line.split(",");
    if (parts.length !== header.length) {
      throw new InputError(
        `${path}: row has ${parts.length} fields, header has ${header.length}`
      );
    }
    const row: Record<string, string> = {};
    header.forEach((h, i) => (row[h] = parts[i].trim()));
    return row;
  });
  return { path, rows };
}

function num(row: Record<string, string>, col: string): number {
  const v = Number(row[col]);
  if (row[col] === "" || !Number.isFinite(v)) {
    throw new InputError(`non-numeric value "${row[col]}" in column "${col}"`);
  }
  return v;
}

/**
 * Extract one plottable series as (n_dofs, value) pairs.
 *
 * eta        estimator per step; zero rows are dropped (log axis).
 * ref_error  squared reference error; the final two rows are dropped,
 *            matching the fitting convention (the reference solution is
 *            the last iterate, which biases the tail).
 * qo_ratio   Q(l) = sum_{k >= l} increment_energy(k) / ref_error(l),
 *            computed from the tail sums of the increment column.
 */
export function seriesPoints(table: RunTable, name: SeriesName): SeriesPoints {
  const rows = table.rows;
  const n: number[] = [];
  const v: number[] = [];
  if (name === "eta") {
    for (const r of rows) {
      const y = num(r, "eta");
      if (y > 0) {
        n.push(num(r, "n_dofs"));
        v.push(y);
      }
    }
  } else if (name === "ref_error") {
    for (const r of rows.slice(0, -2)) {
      if (r.ref_error === "") continue;
      const y = num(r, "ref_error");
      if (y > 0) {
        n.push(num(r, "n_dofs"));
        v.push(y);
      }
    }
  } else {
    const inc = rows.map((r) => r.increment_energy);
    const filled = inc.filter((s) => s !== "").map(Number);
    const tails: number[] = new Array(filled.length).fill(0);
    let acc = 0;
    for (let k = filled.length - 1; k >= 0; k--) {
      acc += filled[k];
      tails[k] = acc;
    }
    const scale = rows.length ? Number(rows[0].ref_error) : 1;
    for (let l = 0; l < filled.length; l++) {
      const ref = num(rows[l], "ref_error");
      if (ref > 1e-12 * scale) {
        n.push(num(rows[l], "n_dofs"));
        v.push(tails[l] / ref);
      }
    }
  }
  return { n, v };
}

/**
 * Least-squares slope of log(v) vs log(n); returns [slope, rms residual].
 * Mirrors the fitting done on the producing side.
 */
export function fitSlope(pts: SeriesPoints): [number, number] {
  if (pts.n.length < 2) {
    throw new InputError(`need at least 2 points for a slope, got ${pts.n.length}`);
  }
  const x = pts.n.map(Math.log);
  const y = pts.v.map(Math.log);
  const m = x.length;
  const xm = x.reduce((a, b) => a + b, 0) / m;
  const ym = y.reduce((a, b) => a + b, 0) / m;
  let sxx = 0;
  let sxy = 0;
  for (let i = 0; i < m; i++) {
    sxx += (x[i] - xm) * (x[i] - xm);
    sxy += (x[i] - xm) * (y[i] - ym);
  }
  const slope = sxy / sxx;
  const icpt = ym - slope * xm;
  let rss = 0;
  for (let i = 0; i < m; i++) {
    const r = y[i] - (slope * x[i] + icpt);
    rss += r * r;
  }
  return [slope, Math.sqrt(rss / m)];
}
