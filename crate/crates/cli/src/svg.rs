//! Small deterministic SVG renderings of the experiment outputs.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 60.0;
const COLORS: [&str; 2] = ["#1f77b4", "#d62728"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn header(out: &mut String, w: f64, h: f64, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, w / 2.0, escape(title));
}

/// Header row plus data rows of a comma-separated table.
fn parse_csv(text: &str, want: &[&str]) -> Result<Vec<Vec<String>>, String> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let head: Vec<&str> = lines.next().ok_or("empty CSV")?.split(',').map(str::trim).collect();
    if head != want {
        return Err(format!("expected CSV header '{}', found '{}'", want.join(","), head.join(",")));
    }
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(|c| c.trim().to_string()).collect()).collect();
    for (i, r) in rows.iter().enumerate() {
        if r.len() != want.len() {
            return Err(format!("CSV row {} has {} fields, expected {}", i + 2, r.len(), want.len()));
        }
    }
    if rows.is_empty() {
        return Err("CSV has no data rows".into());
    }
    Ok(rows)
}

fn num(s: &str) -> Result<f64, String> {
    s.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| format!("'{s}' is not a finite number"))
}

/// Learning curve: proposition accuracy and rho against training-set size.
pub fn curve(text: &str) -> Result<String, String> {
    let rows = parse_csv(text, &["fraction", "n_train", "prop_accuracy", "rho", "best_epoch"])?;
    let xs: Vec<f64> = rows.iter().map(|r| num(&r[1])).collect::<Result<_, _>>()?;
    let series: Vec<(&str, Vec<f64>)> = vec![
        ("proposition accuracy", rows.iter().map(|r| num(&r[2])).collect::<Result<_, _>>()?),
        ("rho", rows.iter().map(|r| num(&r[3])).collect::<Result<_, _>>()?),
    ];
    let (x_lo, x_hi) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(*x), b.max(*x)));
    let span = if x_hi > x_lo { x_hi - x_lo } else { 1.0 };
    let px = |x: f64| MARGIN + (x - x_lo) / span * (W - 2.0 * MARGIN);
    let py = |y: f64| H - MARGIN - y.clamp(0.0, 1.0) * (H - 2.0 * MARGIN);

    let mut out = String::new();
    header(&mut out, W, H, "Learning curve");
    let _ = writeln!(
        out,
        r#"<line x1="{MARGIN}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/><line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{0}" stroke="black"/>"#,
        H - MARGIN,
        W - MARGIN
    );
    for t in 0..=4 {
        let y = t as f64 / 4.0;
        let _ = writeln!(out, r#"<text x="{}" y="{:.1}" text-anchor="end">{y:.2}</text>"#, MARGIN - 6.0, py(y) + 4.0);
    }
    for x in &xs {
        let _ = writeln!(out, r#"<text x="{:.1}" y="{}" text-anchor="middle">{x}</text>"#, px(*x), H - MARGIN + 18.0);
    }
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">training stories</text>"#, W / 2.0, H - 16.0);
    for (k, (name, ys)) in series.iter().enumerate() {
        let color = COLORS[k];
        let points: Vec<String> = xs.iter().zip(ys).map(|(x, y)| format!("{:.1},{:.1}", px(*x), py(*y))).collect();
        let _ = writeln!(out, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, points.join(" "));
        for (x, y) in xs.iter().zip(ys) {
            let _ = writeln!(out, r#"<circle class="marker" cx="{:.1}" cy="{:.1}" r="4" fill="{color}"/>"#, px(*x), py(*y));
        }
        let ly = MARGIN + 16.0 * k as f64;
        let _ = writeln!(out, r#"<rect x="{}" y="{}" width="10" height="10" fill="{color}"/>"#, W - MARGIN - 150.0, ly - 9.0);
        let _ = writeln!(out, r#"<text x="{}" y="{ly}">{name}</text>"#, W - MARGIN - 134.0);
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Ablation table: one row per variant with its accuracy and deltas.
pub fn ablation(text: &str) -> Result<String, String> {
    let rows = parse_csv(text, &["variant", "prop_accuracy", "rho", "delta_accuracy", "delta_rho"])?;
    let row_h = 26.0;
    let h = 80.0 + row_h * rows.len() as f64;
    let cols = [("variant", 20.0), ("accuracy", 220.0), ("rho", 320.0), ("Δ accuracy", 420.0), ("Δ rho", 530.0)];
    let mut out = String::new();
    header(&mut out, W, h, "Ablations");
    for (name, x) in cols {
        let _ = writeln!(out, r#"<text x="{x}" y="56" font-weight="bold">{}</text>"#, escape(name));
    }
    for (i, r) in rows.iter().enumerate() {
        let y = 56.0 + row_h * (i + 1) as f64;
        let acc = num(&r[1])?;
        let _ = writeln!(
            out,
            r#"<rect x="{}" y="{}" width="{:.1}" height="14" fill="{}" opacity="0.25"/>"#,
            cols[1].1,
            y - 11.0,
            acc.clamp(0.0, 1.0) * 80.0,
            COLORS[0]
        );
        let cells = [escape(&r[0]), format!("{acc:.4}"), format!("{:.4}", num(&r[2])?), format!("{:+.4}", num(&r[3])?), format!("{:+.4}", num(&r[4])?)];
        for ((_, x), c) in cols.iter().zip(cells) {
            let _ = writeln!(out, r#"<text x="{x}" y="{y}">{c}</text>"#);
        }
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Metrics report as a two-column table of its scalar fields.
pub fn metrics(text: &str) -> Result<String, String> {
    let v: serde_json::Value = serde_json::from_str(text).map_err(|e| format!("metrics JSON: {e}"))?;
    let obj = v.as_object().ok_or("metrics JSON must be an object")?;
    let mut rows: Vec<(String, String)> = Vec::new();
    fn flatten(prefix: &str, v: &serde_json::Value, rows: &mut Vec<(String, String)>) {
        match v {
            serde_json::Value::Object(m) => {
                for (k, x) in m {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    flatten(&key, x, rows);
                }
            }
            serde_json::Value::Number(n) => {
                let s = n.as_f64().map(|f| if f.fract() == 0.0 { format!("{f}") } else { format!("{f:.4}") });
                rows.push((prefix.into(), s.unwrap_or_else(|| n.to_string())));
            }
            serde_json::Value::String(s) => rows.push((prefix.into(), s.clone())),
            serde_json::Value::Bool(b) => rows.push((prefix.into(), b.to_string())),
            serde_json::Value::Null => rows.push((prefix.into(), "-".into())),
            serde_json::Value::Array(_) => {}
        }
    }
    for (k, x) in obj {
        flatten(k, x, &mut rows);
    }
    let row_h = 22.0;
    let h = 70.0 + row_h * rows.len() as f64;
    let mut out = String::new();
    header(&mut out, W, h, "Metrics");
    for (i, (k, val)) in rows.iter().enumerate() {
        let y = 56.0 + row_h * i as f64;
        let _ = writeln!(out, r#"<text x="20" y="{y}">{}</text><text x="300" y="{y}">{}</text>"#, escape(k), escape(val));
    }
    out.push_str("</svg>\n");
    Ok(out)
}
