/**
 * Plot convergence series from ajn run outputs.
 *
 * Usage:
 *   plot --csv PATH [--csv PATH2] --series eta [--series ref_error] --out fig.svg
 *
 * Each (csv, series) combination becomes one line on a log-log chart of
 * value vs n_dofs, with dashed N^-1 and N^(-1/3) guides anchored at the
 * first data point and the fitted slope of every line in the legend.
 */

import { readFileSync, writeFileSync } from "fs";
import path from "path";
import {
  InputError,
  SERIES_NAMES,
  SeriesName,
  fitSlope,
  parseCsv,
  seriesPoints,
} from "./data";
import { ChartSeries, renderChart, seriesColor } from "./chart";

export interface PlotArgs {
  csvPaths: string[];
  series: SeriesName[];
  out: string;
  guides: number[];
}

export function parseArgs(argv: string[]): PlotArgs {
  const args: PlotArgs = { csvPaths: [], series: [], out: "", guides: [-1, -1 / 3] };
  let i = 0;
  if (argv[0] === "plot") i = 1;
  for (; i < argv.length; i++) {
    const flag = argv[i];
    const need = () => {
      if (i + 1 >= argv.length) throw new InputError(`${flag} needs a value`);
      return argv[++i];
    };
    if (flag === "--csv") {
      args.csvPaths.push(need());
    } else if (flag === "--series") {
      const name = need();
      if (!SERIES_NAMES.includes(name as SeriesName)) {
        throw new InputError(
          `unknown series "${name}" (expected ${SERIES_NAMES.join(" | ")})`
        );
      }
      args.series.push(name as SeriesName);
    } else if (flag === "--out") {
      args.out = need();
    } else {
      throw new InputError(`unknown flag "${flag}"`);
    }
  }
  if (args.csvPaths.length === 0) throw new InputError("at least one --csv is required");
  if (args.series.length === 0) throw new InputError("empty series selection");
  if (!args.out) throw new InputError("--out is required");
  return args;
}

function runLabel(csvPath: string, nPaths: number): string {
  if (nPaths === 1) return "";
  // prefer the run directory name; fall back to the file stem
  const dir = path.basename(path.dirname(path.resolve(csvPath)));
  return dir && dir !== "." ? dir : path.basename(csvPath, ".csv");
}

export function buildFigure(args: PlotArgs): string {
  const tables = args.csvPaths.map((p) => parseCsv(readFileSync(p, "utf-8"), p));
  const series: ChartSeries[] = [];
  for (const table of tables) {
    for (const name of args.series) {
      const pts = seriesPoints(table, name);
      if (pts.n.length === 0) {
        throw new InputError(`${table.path}: series "${name}" has no plottable points`);
      }
      const [slope] = fitSlope(pts);
      const prefix = runLabel(table.path, tables.length);
      series.push({
        label: prefix ? `${prefix} ${name}` : name,
        n: pts.n,
        v: pts.v,
        color: seriesColor(series.length),
        slope,
      });
    }
  }
  return renderChart({
    title: "Convergence",
    xLabel: "degrees of freedom N",
    yLabel: args.series.join(", "),
    series,
    guides: args.guides,
  });
}

export function main(argv: string[]): number {
  try {
    const args = parseArgs(argv);
    const svg = buildFigure(args);
    writeFileSync(args.out, svg);
    console.log(`wrote ${args.out}`);
    return 0;
  } catch (err) {
    if (err instanceof InputError) {
      console.error(`input error: ${err.message}`);
      return 2;
    }
    if (err instanceof Error && "code" in err && (err as any).code === "ENOENT") {
      console.error(`input error: ${err.message}`);
      return 2;
    }
    throw err;
  }
}

if (require.main === module) {
  process.exit(main(process.argv.slice(2)));
}
