use serde::{Deserialize, Serialize};

use super::{ShapeClass, Video};

/// One moving object in a scene. Index in the scene's object list is its draw
/// order: later objects are drawn on top.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SceneObject {
    pub instance_id: u32,
    pub class: ShapeClass,
    /// Index of `class` in the dataset's label space.
    pub label: usize,
    /// Half of the shape's extent in pixels.
    pub radius: f64,
    pub start: [f64; 2],
    pub velocity: [f64; 2],
    pub color: [f64; 3],
    /// Visible on frames `visible.0 .. visible.1`.
    pub visible: (usize, usize),
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Scene {
    pub frame_h: usize,
    pub frame_w: usize,
    pub num_frames: usize,
    pub background: [f64; 3],
    pub objects: Vec<SceneObject>,
    /// Per-frame, per-object colour offsets, `jitter[t][k]`.
    pub jitter: Vec<Vec<[f64; 3]>>,
}

/// Reflects a 1-D position into `[lo, hi]`, flipping the velocity on each bounce.
fn bounce(mut p: f64, mut v: f64, lo: f64, hi: f64, steps: usize) -> f64 {
    for _ in 0..steps {
        p += v;
        if p < lo {
            p = 2.0 * lo - p;
            v = -v;
        } else if p > hi {
            p = 2.0 * hi - p;
            v = -v;
        }
    }
    p
}

impl SceneObject {
    /// Centre at frame `t` under constant velocity with elastic bounce off the frame edges.
    pub fn center(&self, t: usize, frame_h: usize, frame_w: usize) -> [f64; 2] {
        let r = self.radius;
        [
            bounce(self.start[0], self.velocity[0], r, frame_w as f64 - r, t),
            bounce(self.start[1], self.velocity[1], r, frame_h as f64 - r, t),
        ]
    }

    pub fn is_visible(&self, t: usize) -> bool {
        t >= self.visible.0 && t < self.visible.1
    }

    /// Whether the pixel centre `(px, py)` lies inside the shape centred at `c`.
    pub fn covers(&self, c: [f64; 2], px: f64, py: f64) -> bool {
        let (dx, dy, r) = (px - c[0], py - c[1], self.radius);
        match self.class {
            ShapeClass::Disk => dx * dx + dy * dy <= r * r,
            ShapeClass::Square => dx.abs() <= r && dy.abs() <= r,
            // apex at top, base along y = +r
            ShapeClass::Triangle => dy <= r && dy >= -r && dx.abs() <= (dy + r) / 2.0,
        }
    }
}

impl Scene {
    /// Renders frame `t`: RGB bytes `[H*W*3]` and the id map `[H*W]` where
    /// 0 is background and `k + 1` is object `k`.
    pub fn render_frame(&self, t: usize) -> (Vec<u8>, Vec<u8>) {
        let (h, w) = (self.frame_h, self.frame_w);
        let mut ids = vec![0u8; h * w];
        for (k, obj) in self.objects.iter().enumerate() {
            if !obj.is_visible(t) {
                continue;
            }
            let c = obj.center(t, h, w);
            let r = obj.radius;
            let x0 = (c[0] - r).floor().max(0.0) as usize;
            let y0 = (c[1] - r).floor().max(0.0) as usize;
            let x1 = ((c[0] + r).ceil() as usize).min(w);
            let y1 = ((c[1] + r).ceil() as usize).min(h);
            for y in y0..y1 {
                for x in x0..x1 {
                    if obj.covers(c, x as f64 + 0.5, y as f64 + 0.5) {
                        ids[y * w + x] = (k + 1) as u8;
                    }
                }
            }
        }
        let mut rgb = vec![0u8; h * w * 3];
        for (p, &id) in ids.iter().enumerate() {
            let col = if id == 0 {
                self.background
            } else {
                let k = id as usize - 1;
                let (base, j) = (self.objects[k].color, self.jitter[t][k]);
                [base[0] + j[0], base[1] + j[1], base[2] + j[2]]
            };
            for ch in 0..3 {
                rgb[p * 3 + ch] = col[ch].round().clamp(0.0, 255.0) as u8;
            }
        }
        (rgb, ids)
    }

    pub fn render(&self, index: usize) -> Video {
        let (mut frames, mut ids) = (Vec::new(), Vec::new());
        for t in 0..self.num_frames {
            let (f, i) = self.render_frame(t);
            frames.push(f);
            ids.push(i);
        }
        let labels: Vec<usize> = self.objects.iter().map(|o| o.label).collect();
        let instance_ids: Vec<u32> = self.objects.iter().map(|o| o.instance_id).collect();
        Video::from_id_maps(index, self.frame_h, self.frame_w, frames, ids, &labels, &instance_ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obj(class: ShapeClass, x: f64, y: f64, r: f64) -> SceneObject {
        SceneObject {
            instance_id: 0,
            class,
            label: 0,
            radius: r,
            start: [x, y],
            velocity: [0.0, 0.0],
            color: [200.0, 50.0, 50.0],
            visible: (0, 1),
        }
    }

    fn scene(objects: Vec<SceneObject>) -> Scene {
        let n = objects.len();
        Scene {
            frame_h: 32,
            frame_w: 32,
            num_frames: 1,
            background: [10.0; 3],
            objects,
            jitter: vec![vec![[0.0; 3]; n]],
        }
    }

    #[test]
    fn bounce_stays_inside() {
        let o = SceneObject { velocity: [7.0, -5.0], ..obj(ShapeClass::Disk, 10.0, 10.0, 4.0) };
        for t in 0..200 {
            let c = o.center(t, 32, 48);
            assert!(c[0] >= 4.0 && c[0] <= 44.0 && c[1] >= 4.0 && c[1] <= 28.0, "{t} {c:?}");
        }
    }

    #[test]
    fn square_area_is_exact() {
        let s = scene(vec![obj(ShapeClass::Square, 16.0, 16.0, 4.0)]);
        let (_, ids) = s.render_frame(0);
        assert_eq!(ids.iter().filter(|&&v| v == 1).count(), 64);
    }

    #[test]
    fn later_object_occludes() {
        let s = scene(vec![
            obj(ShapeClass::Square, 12.0, 12.0, 5.0),
            obj(ShapeClass::Disk, 16.0, 16.0, 5.0),
        ]);
        let (rgb, ids) = s.render_frame(0);
        let p = 16 * 32 + 16;
        assert_eq!(ids[p], 2);
        assert_eq!(ids[8 * 32 + 8], 1);
        assert_eq!(rgb[0], 10);
    }

    #[test]
    fn triangle_narrows_towards_apex() {
        let s = scene(vec![obj(ShapeClass::Triangle, 16.0, 16.0, 8.0)]);
        let (_, ids) = s.render_frame(0);
        let row = |y: usize| (0..32).filter(|&x| ids[y * 32 + x] == 1).count();
        assert!(row(9) < row(16) && row(16) < row(23));
    }
}
