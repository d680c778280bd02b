use std::fmt::Write as _;

use vf_core::harness::EpisodeRecord;

const PANEL_W: f64 = 420.0;
const PANEL_H: f64 = 260.0;
const MARGIN: f64 = 48.0;
const TRAIN_COLOR: &str = "#1f77b4";
const VAL_COLOR: &str = "#d62728";

struct Panel {
    title: &'static str,
    x0: f64,
    y_max: f64,
}

impl Panel {
    fn point(&self, episode: f64, value: f64, episodes: f64) -> (f64, f64) {
        let x = self.x0 + MARGIN + (episode - 1.0) / (episodes - 1.0).max(1.0) * (PANEL_W - MARGIN - 12.0);
        let y = MARGIN / 2.0 + (1.0 - (value / self.y_max).clamp(0.0, 1.0)) * (PANEL_H - MARGIN);
        (x, y)
    }
}

fn polyline(out: &mut String, panel: &Panel, pts: impl Iterator<Item = (f64, f64)>, episodes: f64, color: &str, dashed: bool) {
    let coords: Vec<String> = pts
        .map(|(e, v)| {
            let (x, y) = panel.point(e, v, episodes);
            format!("{x:.2},{y:.2}")
        })
        .collect();
    let dash = if dashed { r#" stroke-dasharray="6 4""# } else { "" };
    let _ = writeln!(
        out,
        r#"<polyline fill="none" stroke="{color}" stroke-width="1.5"{dash} points="{}"/>"#,
        coords.join(" ")
    );
}

/// Two panels (loss, accuracy) with train and validation curves. Curves
/// from `compare` are overlaid dashed.
pub fn render_svg(title: &str, runs: &[(&str, &[EpisodeRecord])]) -> String {
    let episodes = runs.iter().map(|(_, r)| r.len()).max().unwrap_or(1) as f64;
    let loss_max = runs
        .iter()
        .flat_map(|(_, r)| r.iter().flat_map(|e| [e.train_loss, e.val_loss]))
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max)
        .max(1e-3)
        * 1.05;
    let panels = [
        Panel { title: "loss", x0: 0.0, y_max: loss_max },
        Panel { title: "accuracy", x0: PANEL_W, y_max: 1.0 },
    ];
    let width = 2.0 * PANEL_W;
    let height = PANEL_H + 40.0;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, "<title>{}</title>", escape(title));
    let _ = writeln!(out, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    for p in &panels {
        let (left, top) = (p.x0 + MARGIN, MARGIN / 2.0);
        let (right, bottom) = (p.x0 + PANEL_W - 12.0, PANEL_H - MARGIN / 2.0);
        let _ = writeln!(
            out,
            r##"<rect x="{left}" y="{top}" width="{}" height="{}" fill="none" stroke="#444"/>"##,
            right - left,
            bottom - top
        );
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (left + right) / 2.0, top - 6.0, p.title);
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">{:.2}</text>"#, left - 4.0, top + 4.0, p.y_max);
        let _ = writeln!(out, r#"<text x="{}" y="{bottom}" text-anchor="end">0</text>"#, left - 4.0);
        let _ = writeln!(out, r#"<text x="{left}" y="{}">1</text>"#, bottom + 14.0);
        let _ = writeln!(out, r#"<text x="{right}" y="{}" text-anchor="end">{episodes}</text>"#, bottom + 14.0);
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">episode</text>"#, (left + right) / 2.0, bottom + 14.0);
    }
    for (i, (label, records)) in runs.iter().enumerate() {
        let dashed = i > 0;
        let ep = |r: &EpisodeRecord| r.episode as f64;
        polyline(&mut out, &panels[0], records.iter().map(|r| (ep(r), r.train_loss)), episodes, TRAIN_COLOR, dashed);
        polyline(&mut out, &panels[0], records.iter().map(|r| (ep(r), r.val_loss)), episodes, VAL_COLOR, dashed);
        polyline(&mut out, &panels[1], records.iter().map(|r| (ep(r), r.train_acc)), episodes, TRAIN_COLOR, dashed);
        polyline(&mut out, &panels[1], records.iter().map(|r| (ep(r), r.val_acc)), episodes, VAL_COLOR, dashed);
        let style = if dashed { "dashed" } else { "solid" };
        let _ = writeln!(
            out,
            r#"<text x="{MARGIN}" y="{}">{style}: {} (blue train, red validation)</text>"#,
            PANEL_H + 4.0 + 14.0 * i as f64,
            escape(label)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn records(n: usize) -> Vec<EpisodeRecord> {
        (1..=n)
            .map(|e| EpisodeRecord {
                episode: e,
                train_loss: 0.7 / e as f64,
                train_acc: 0.5,
                val_loss: 0.69,
                val_acc: 0.5,
                lr: 1e-3,
                seconds: e as f64,
            })
            .collect()
    }

    #[test]
    fn four_polylines_per_run() {
        let a = records(100);
        let svg = render_svg("a", &[("a", &a)]);
        assert_eq!(svg.matches("<polyline").count(), 4);
        assert!(!svg.contains("dasharray"));
        let b = records(50);
        let svg = render_svg("a vs b", &[("a", &a), ("b<1>", &b)]);
        assert_eq!(svg.matches("<polyline").count(), 8);
        assert_eq!(svg.matches("stroke-dasharray").count(), 4);
        assert!(svg.contains("b&lt;1&gt;"));
    }

    #[test]
    fn points_stay_inside_the_panel() {
        let a = records(10);
        let svg = render_svg("a", &[("a", &a)]);
        for cap in svg.split("points=\"").skip(1) {
            for pair in cap.split('"').next().unwrap().split(' ') {
                let (x, y) = pair.split_once(',').unwrap();
                let (x, y): (f64, f64) = (x.parse().unwrap(), y.parse().unwrap());
                assert!((0.0..=2.0 * PANEL_W).contains(&x) && (0.0..=PANEL_H).contains(&y), "{x},{y}");
            }
        }
    }
}
