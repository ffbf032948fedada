//! Top-down raster of a city map, written as binary PPM.

use crate::procgen::CityMap;
use crate::world_model::Category;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB, row 0 at the top (largest y).
    pub rgb: Vec<u8>,
}

impl Image {
    fn new(width: usize, height: usize, fill: [u8; 3]) -> Self {
        Self { width, height, rgb: fill.repeat(width * height) }
    }

    pub fn pixel(&self, col: usize, row: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    fn set(&mut self, col: usize, row: usize, c: [u8; 3]) {
        let i = (row * self.width + col) * 3;
        self.rgb[i..i + 3].copy_from_slice(&c);
    }

    /// Binary P6 encoding.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }
}

const GROUND: [u8; 3] = [214, 222, 196];
const SIDEWALK: [u8; 3] = [190, 190, 184];
const ROAD: [u8; 3] = [70, 70, 76];

pub fn category_color(c: Category) -> [u8; 3] {
    match c {
        Category::RoadSegment => ROAD,
        Category::Building => [168, 112, 86],
        Category::Vegetation => [60, 140, 60],
        Category::UrbanProp => [230, 180, 40],
        Category::Vehicle => [40, 90, 200],
        Category::Pedestrian | Category::Humanoid => [220, 40, 40],
        Category::Robot => [200, 40, 200],
        Category::TrafficSignal => [250, 250, 250],
        Category::GeneratedAsset => [40, 200, 200],
    }
}

/// Renders roads with their sidewalks, then every non-road entity footprint.
/// Fails on a non-positive scale or an image over 64 megapixels.
pub fn render_map(map: &CityMap, px_per_m: f64) -> Result<Image, String> {
    let ext = map.scene.extent();
    if !(px_per_m > 0.0 && px_per_m.is_finite()) {
        return Err("scale must be positive".into());
    }
    let w = (ext.width() * px_per_m).ceil() as usize;
    let h = (ext.height() * px_per_m).ceil() as usize;
    if w == 0 || h == 0 || w.saturating_mul(h) > 64_000_000 {
        return Err(format!("image size {w}x{h} out of range"));
    }
    let mut img = Image::new(w, h, GROUND);
    // Pixel centers in world coordinates.
    let world = |col: usize, row: usize| (ext.min_x + (col as f64 + 0.5) / px_per_m, ext.max_y - (row as f64 + 0.5) / px_per_m);
    let cols = |x0: f64, x1: f64| {
        let a = ((x0 - ext.min_x) * px_per_m).floor().max(0.0) as usize;
        let b = ((x1 - ext.min_x) * px_per_m).ceil().min(w as f64) as usize;
        a..b
    };
    let rows = |y0: f64, y1: f64| {
        let a = ((ext.max_y - y1) * px_per_m).floor().max(0.0) as usize;
        let b = ((ext.max_y - y0) * px_per_m).ceil().min(h as f64) as usize;
        a..b
    };
    for pass in [0, 1] {
        for s in &map.roads.segments {
            let half = s.width / 2.0 + if pass == 0 { s.sidewalk_width } else { 0.0 };
            let color = if pass == 0 { SIDEWALK } else { ROAD };
            let (dx, dy) = (s.b.x - s.a.x, s.b.y - s.a.y);
            let len2 = dx * dx + dy * dy;
            for row in rows(s.a.y.min(s.b.y) - half, s.a.y.max(s.b.y) + half) {
                for col in cols(s.a.x.min(s.b.x) - half, s.a.x.max(s.b.x) + half) {
                    let (x, y) = world(col, row);
                    let t = if len2 > 0.0 { (((x - s.a.x) * dx + (y - s.a.y) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
                    let (px, py) = (s.a.x + t * dx - x, s.a.y + t * dy - y);
                    if px * px + py * py <= half * half {
                        img.set(col, row, color);
                    }
                }
            }
        }
    }
    let mut entities: Vec<_> = map.scene.entities().filter(|e| e.category != Category::RoadSegment).collect();
    // Large footprints first so small props stay visible on top.
    entities.sort_by(|a, b| {
        let area = |e: &&crate::world_model::SceneEntity| e.footprint.width() * e.footprint.height();
        area(b).total_cmp(&area(a)).then(a.id.cmp(&b.id))
    });
    for e in entities {
        let f = e.footprint;
        for row in rows(f.min_y, f.max_y) {
            for col in cols(f.min_x, f.max_x) {
                img.set(col, row, category_color(e.category));
            }
        }
    }
    Ok(img)
}
