import { describe, expect, it } from "vitest";
import { mkdtempSync, readFileSync, writeFileSync } from "fs";
import { tmpdir } from "os";
import path from "path";
import {
  InputError,
  fitSlope,
  parseCsv,
  seriesPoints,
} from "../src/data";
import { extractChartData } from "../src/chart";
import { buildFigure, main, parseArgs } from "../src/cli";

const FIXTURES = path.join(__dirname, "fixtures");
const SAMPLE = path.join(FIXTURES, "sample.csv");
const UNIFORM = path.join(FIXTURES, "uniform.csv");
const GOLDEN = path.join(FIXTURES, "golden.json");

function syntheticCsv(rows: [number, number, number][]): string {
  const lines = ["step,n_elements,n_dofs,eta,marked,increment_energy,ref_error"];
  rows.forEach(([n, eta, ref], i) => {
    const last = i === rows.length - 1;
    lines.push(`${i},${n},${n},${eta},${last ? 0 : 1},${last ? "" : "1.0"},${ref}`);
  });
  return lines.join("\n") + "\n";
}

function writeTmp(name: string, text: string): string {
  const dir = mkdtempSync(path.join(tmpdir(), "ajnplot-"));
  const p = path.join(dir, name);
  writeFileSync(p, text);
  return p;
}

describe("csv parsing", () => {
  it("rejects a CSV with a missing column, naming it", () => {
    const text = "step,n_elements,n_dofs,marked,increment_energy,ref_error\n0,1,1,0,,0\n";
    expect(() => parseCsv(text, "bad.csv")).toThrowError(/missing column "eta"/);
  });

  it("rejects ragged rows", () => {
    const text = "step,n_elements,n_dofs,eta,marked,increment_energy,ref_error\n0,1,2\n";
    expect(() => parseCsv(text, "bad.csv")).toThrowError(InputError);
  });

  it("loads the sample fixture", () => {
    const table = parseCsv(readFileSync(SAMPLE, "utf-8"), SAMPLE);
    expect(table.rows.length).toBeGreaterThanOrEqual(5);
    expect(table.rows[0].step).toBe("0");
  });
});

describe("series extraction", () => {
  const table = parseCsv(readFileSync(SAMPLE, "utf-8"), SAMPLE);

  it("eta uses every positive row", () => {
    const pts = seriesPoints(table, "eta");
    expect(pts.n.length).toBe(table.rows.length);
    expect(pts.v[0]).toBe(Number(table.rows[0].eta));
  });

  it("ref_error drops the final two rows", () => {
    const pts = seriesPoints(table, "ref_error");
    expect(pts.n.length).toBe(table.rows.length - 2);
    expect(pts.v[pts.v.length - 1]).toBe(
      Number(table.rows[table.rows.length - 3].ref_error)
    );
  });

  it("qo_ratio is the increment tail sum over the reference error", () => {
    const pts = seriesPoints(table, "qo_ratio");
    const inc = table.rows
      .map((r) => r.increment_energy)
      .filter((s) => s !== "")
      .map(Number);
    const tail0 = inc.reduce((a, b) => a + b, 0);
    expect(pts.v[0]).toBeCloseTo(tail0 / Number(table.rows[0].ref_error), 12);
    // the very last defined ratio is exactly 1: the tail is a single
    // increment and equals the reference error of that step
    expect(pts.v[pts.v.length - 1]).toBeCloseTo(1.0, 9);
  });

  it("qo_ratio on an empty increment column has no points", () => {
    const text = syntheticCsv([[10, 1.0, 0.0]]);
    const t = parseCsv(text, "tiny.csv");
    const pts = seriesPoints(t, "qo_ratio");
    expect(pts.n.length).toBe(0);
  });
});

describe("slope fitting", () => {
  it("recovers an exact power law", () => {
    const n = [10, 20, 40, 80, 160, 320];
    const v = n.map((x) => 7.3 / x);
    const [slope, resid] = fitSlope({ n, v });
    expect(Math.abs(slope + 1)).toBeLessThan(1e-12);
    expect(resid).toBeLessThan(1e-12);
  });

  it("is zero for constant data", () => {
    const n = [10, 100, 1000];
    const [slope] = fitSlope({ n, v: [2, 2, 2] });
    expect(Math.abs(slope)).toBeLessThan(1e-12);
  });
});

describe("figure building", () => {
  it("golden: sample CSV embeds its data exactly", () => {
    const svg = buildFigure({
      csvPaths: [SAMPLE],
      series: ["eta", "ref_error"],
      out: "",
      guides: [-1, -1 / 3],
    });
    const data = extractChartData(svg);
    const golden = JSON.parse(readFileSync(GOLDEN, "utf-8"));
    expect(data).toEqual(golden);
  });

  it("an exact N^-1 series is parallel to the N^-1 guide", () => {
    const rows: [number, number, number][] = [];
    for (const n of [10, 20, 40, 80, 160]) rows.push([n, 100 / n, 0]);
    const p = writeTmp("synth.csv", syntheticCsv(rows));
    const svg = buildFigure({ csvPaths: [p], series: ["eta"], out: "", guides: [-1] });
    const data = extractChartData(svg);
    expect(Math.abs(data.series[0].slope - data.guides[0])).toBeLessThan(1e-12);
    expect(svg).toContain("slope -1.000");
    expect(svg).toContain("N^-1");
  });

  it("two-run comparison puts adaptive below uniform at its last point", () => {
    const svg = buildFigure({
      csvPaths: [SAMPLE, UNIFORM],
      series: ["eta"],
      out: "",
      guides: [-1, -1 / 3],
    });
    const data = extractChartData(svg);
    expect(data.series.length).toBe(2);
    const [adaptive, uniform] = data.series;
    // interpolate the uniform curve at the adaptive end point
    const nEnd = Math.min(
      adaptive.n[adaptive.n.length - 1],
      uniform.n[uniform.n.length - 1]
    );
    const at = (s: { n: number[]; v: number[] }, x: number) => {
      let i = s.n.findIndex((n) => n >= x);
      if (i <= 0) return s.v[Math.max(i, 0)];
      const t =
        (Math.log(x) - Math.log(s.n[i - 1])) /
        (Math.log(s.n[i]) - Math.log(s.n[i - 1]));
      return Math.exp((1 - t) * Math.log(s.v[i - 1]) + t * Math.log(s.v[i]));
    };
    expect(at(adaptive, nEnd)).toBeLessThan(at(uniform, nEnd));
    expect(svg).toMatch(/slope -\d\.\d{3}/);
  });

  it("empty series selection is an input error", () => {
    expect(() => parseArgs(["--csv", SAMPLE, "--out", "x.svg"])).toThrowError(
      /empty series/
    );
  });

  it("a series with no plottable points is an input error", () => {
    const p = writeTmp("zero.csv", syntheticCsv([[10, 0, 0], [20, 0, 0], [40, 0, 0]]));
    expect(() =>
      buildFigure({ csvPaths: [p], series: ["eta"], out: "", guides: [-1] })
    ).toThrowError(/no plottable points/);
  });
});

describe("cli", () => {
  it("writes the figure and exits 0", () => {
    const out = writeTmp("fig.svg", "");
    const code = main(["plot", "--csv", SAMPLE, "--series", "eta", "--out", out]);
    expect(code).toBe(0);
    const svg = readFileSync(out, "utf-8");
    expect(svg).toContain("<svg");
    expect(extractChartData(svg).series[0].label).toBe("eta");
  });

  it("unknown series name exits 2", () => {
    expect(main(["--csv", SAMPLE, "--series", "bogus", "--out", "x.svg"])).toBe(2);
  });

  it("missing file exits 2", () => {
    expect(main(["--csv", "/nonexistent.csv", "--series", "eta", "--out", "x.svg"])).toBe(2);
  });

  it("schema mismatch exits 2 and names the column", () => {
    const p = writeTmp("bad.csv", "step,n_dofs\n0,1\n");
    expect(main(["--csv", p, "--series", "eta", "--out", "x.svg"])).toBe(2);
  });
});
