/**
 * Self-contained log-log SVG line chart.
 *
 * No rendering dependencies; the figure is assembled as an SVG string.
 * The plotted data is also embedded verbatim in a <metadata> block as
 * JSON so that tests (and downstream tooling) can recover the series
 * exactly without pixel comparisons.
 */

export interface ChartSeries {
  label: string;
  n: number[];
  v: number[];
  color: string;
  /** fitted log-log slope, shown in the legend */
  slope: number;
}

export interface ChartOpts {
  title: string;
  xLabel: string;
  yLabel: string;
  series: ChartSeries[];
  /** exponents of dashed N^p guide lines, anchored at the first data point */
  guides: number[];
}

const COLORS = ["#4361ee", "#e63946", "#2d6a4f", "#9d4edd", "#f3722c"];

export function seriesColor(i: number): string {
  return COLORS[i % COLORS.length];
}

function esc(s: string): string {
  return s.replace(/&/g, "&amp;").replace(/</g, "&lt;").replace(/>/g, "&gt;");
}

function decadeTicks(lo: number, hi: number): number[] {
  const ticks: number[] = [];
  for (let e = Math.ceil(Math.log10(lo) - 1e-9); Math.pow(10, e) <= hi * (1 + 1e-9); e++) {
    ticks.push(Math.pow(10, e));
  }
  return ticks;
}

function fmtPow(v: number): string {
  const e = Math.round(Math.log10(v));
  if (Math.abs(v - Math.pow(10, e)) < 1e-9 * v) return `1e${e}`;
  return v.toPrecision(2);
}

function guideLabel(p: number): string {
  if (Number.isInteger(p)) return `N^${p}`;
  // small rational exponents read better as fractions
  for (const q of [2, 3, 4, 5, 6]) {
    if (Math.abs(p * q - Math.round(p * q)) < 1e-9) {
      return `N^(${Math.round(p * q)}/${q})`;
    }
  }
  return `N^${p.toFixed(2)}`;
}

export function renderChart(opts: ChartOpts): string {
  const { series, guides } = opts;
  const allN = series.flatMap((s) => s.n);
  const allV = series.flatMap((s) => s.v);

  // guides are anchored at the first point of the first series
  const n0 = series[0].n[0];
  const v0 = series[0].v[0];
  const nMax = Math.max(...allN);
  const guideVals = guides.flatMap((p) => [v0, v0 * Math.pow(nMax / n0, p)]);

  const xMin = Math.min(...allN);
  const xMax = nMax;
  const yMin = Math.min(...allV, ...guideVals);
  const yMax = Math.max(...allV, ...guideVals);

  const W = 640;
  const H = 420;
  const ml = 64;
  const mr = 20;
  const mt = 36;
  const mb = 52;
  const pw = W - ml - mr;
  const ph = H - mt - mb;

  const lx = (v: number) => Math.log(v);
  const padX = 0.04 * (lx(xMax) - lx(xMin) || 1);
  const padY = 0.06 * (lx(yMax) - lx(yMin) || 1);
  const xa = lx(xMin) - padX;
  const xb = lx(xMax) + padX;
  const ya = lx(yMin) - padY;
  const yb = lx(yMax) + padY;
  const xOf = (v: number) => ml + ((lx(v) - xa) / (xb - xa)) * pw;
  const yOf = (v: number) => mt + ph - ((lx(v) - ya) / (yb - ya)) * ph;

  const meta = {
    schema: 1,
    series: series.map((s) => ({ label: s.label, n: s.n, v: s.v, slope: s.slope })),
    guides,
  };

  let s = `<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 ${W} ${H}" font-family="Helvetica, Arial, sans-serif">\n`;
  s += `<metadata id="chart-data">${esc(JSON.stringify(meta))}</metadata>\n`;
  s += `<rect width="${W}" height="${H}" fill="#fff"/>\n`;
  s += `<text x="${ml}" y="${mt - 14}" font-size="13" font-weight="600" fill="#222">${esc(opts.title)}</text>\n`;

  // decade grid
  for (const t of decadeTicks(Math.exp(xa), Math.exp(xb))) {
    const x = xOf(t);
    s += `<line x1="${x.toFixed(1)}" y1="${mt}" x2="${x.toFixed(1)}" y2="${mt + ph}" stroke="#eee" stroke-width="0.6"/>\n`;
    s += `<text x="${x.toFixed(1)}" y="${mt + ph + 16}" text-anchor="middle" font-size="9" fill="#666">${fmtPow(t)}</text>\n`;
  }
  for (const t of decadeTicks(Math.exp(ya), Math.exp(yb))) {
    const y = yOf(t);
    s += `<line x1="${ml}" y1="${y.toFixed(1)}" x2="${ml + pw}" y2="${y.toFixed(1)}" stroke="#eee" stroke-width="0.6"/>\n`;
    s += `<text x="${ml - 6}" y="${(y + 3).toFixed(1)}" text-anchor="end" font-size="9" fill="#666">${fmtPow(t)}</text>\n`;
  }

  // dashed reference guides
  for (const p of guides) {
    const vEnd = v0 * Math.pow(nMax / n0, p);
    s += `<line x1="${xOf(n0).toFixed(1)}" y1="${yOf(v0).toFixed(1)}" x2="${xOf(nMax).toFixed(1)}" y2="${yOf(vEnd).toFixed(1)}" stroke="#888" stroke-width="1" stroke-dasharray="6,4"/>\n`;
    s += `<text x="${(xOf(nMax) - 4).toFixed(1)}" y="${(yOf(vEnd) - 5).toFixed(1)}" text-anchor="end" font-size="9" fill="#888">${esc(guideLabel(p))}</text>\n`;
  }

  // data series
  for (const sr of series) {
    const pts = sr.n
      .map((x, i) => `${xOf(x).toFixed(1)},${yOf(sr.v[i]).toFixed(1)}`)
      .join(" ");
    s += `<polyline fill="none" stroke="${sr.color}" stroke-width="1.4" points="${pts}"/>\n`;
    for (let i = 0; i < sr.n.length; i++) {
      s += `<circle cx="${xOf(sr.n[i]).toFixed(1)}" cy="${yOf(sr.v[i]).toFixed(1)}" r="2" fill="${sr.color}"/>\n`;
    }
  }

  // axes frame
  s += `<line x1="${ml}" y1="${mt}" x2="${ml}" y2="${mt + ph}" stroke="#333" stroke-width="0.8"/>\n`;
  s += `<line x1="${ml}" y1="${mt + ph}" x2="${ml + pw}" y2="${mt + ph}" stroke="#333" stroke-width="0.8"/>\n`;
  s += `<text x="${ml + pw / 2}" y="${H - 6}" text-anchor="middle" font-size="11" fill="#444">${esc(opts.xLabel)}</text>\n`;
  s += `<text x="16" y="${mt + ph / 2}" text-anchor="middle" font-size="11" fill="#444" transform="rotate(-90,16,${mt + ph / 2})">${esc(opts.yLabel)}</text>\n`;

  // legend with fitted slopes
  const entries = series.map((sr) => `${sr.label} (slope ${sr.slope.toFixed(3)})`);
  const legendW = Math.max(...entries.map((t) => t.length)) * 5.4 + 30;
  const legendH = entries.length * 14 + 6;
  const lx0 = ml + pw - legendW - 4;
  const ly0 = mt + 4;
  s += `<rect x="${lx0}" y="${ly0}" width="${legendW}" height="${legendH}" rx="2" fill="white" fill-opacity="0.85" stroke="#ddd" stroke-width="0.5"/>\n`;
  series.forEach((sr, i) => {
    const y = ly0 + 12 + i * 14;
    s += `<line x1="${lx0 + 6}" y1="${y - 3}" x2="${lx0 + 22}" y2="${y - 3}" stroke="${sr.color}" stroke-width="1.4"/>\n`;
    s += `<text x="${lx0 + 26}" y="${y}" font-size="9.5" fill="#444">${esc(entries[i])}</text>\n`;
  });

  s += `</svg>\n`;
  return s;
}

/** Recover the embedded data block from a rendered chart. */
export function extractChartData(svg: string): {
  schema: number;
  series: { label: string; n: number[]; v: number[]; slope: number }[];
  guides: number[];
} {
  const m = svg.match(/<metadata id="chart-data">([\s\S]*?)<\/metadata>/);
  if (!m) throw new Error("no chart-data metadata block in SVG");
  const json = m[1]
    .replace(/&lt;/g, "<")
    .replace(/&gt;/g, ">")
    .replace(/&amp;/g, "&");
  return JSON.parse(json);
}
