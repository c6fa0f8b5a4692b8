//! Template language over scenes: the canonical caption, referring
//! expressions with a brute-force uniqueness resolver, and relational
//! reasoning QA. Everything enumerates in a fixed order so generation is
//! deterministic given the rng stream that picks among candidates.

use crate::lang::{obj_marker, COLORS, NUMBERS, SHAPES};
use crate::scene::{Scene, Shape};

/// Canonical caption. One surface form per scene: the count, then one
/// clause per object in list order. With generated scenes (canonical color
/// order, fixed quadrant placement) this text fully determines the raster.
pub fn caption(scene: &Scene) -> String {
    let n = scene.objects.len();
    let noun = if n == 1 { "object" } else { "objects" };
    let mut out = format!("a scene with {} {noun}", NUMBERS[n - 1]);
    for (i, o) in scene.objects.iter().enumerate() {
        let sep = if i == 0 { "" } else { " and" };
        out.push_str(&format!(
            "{sep} a {} {} {}",
            o.mod_word(),
            COLORS[o.color],
            o.shape.word()
        ));
    }
    out
}

/// A referring expression together with the 1-based index of the object it
/// denotes under brute-force evaluation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RefCandidate {
    pub expression: String,
    pub obj_id: usize,
}

fn shape_set(scene: &Scene, s: Shape) -> Vec<usize> {
    (0..scene.objects.len()).filter(|&i| scene.objects[i].shape == s).collect()
}

/// Index of the strict argmax of `key` over `set`, or None on a tie.
fn unique_extreme(set: &[usize], key: &[usize], max: bool) -> Option<usize> {
    let mut best = *set.first()?;
    let mut tied = false;
    for &i in &set[1..] {
        let better = if max { key[i] > key[best] } else { key[i] < key[best] };
        if better {
            best = i;
            tied = false;
        } else if key[i] == key[best] {
            tied = true;
        }
    }
    if tied {
        None
    } else {
        Some(best)
    }
}

/// Evaluates one expression against the scene, returning every matching
/// object index. This is the oracle the templates are checked against: an
/// expression is emitted only when this returns exactly one index.
pub fn resolve_refexp(scene: &Scene, expression: &str) -> Vec<usize> {
    let toks: Vec<&str> = expression.split_whitespace().collect();
    let objs = &scene.objects;
    let areas = scene.areas();
    let find_color = |w: &str| COLORS.iter().position(|&c| c == w);
    let find_shape = |w: &str| match w {
        "square" => Some(Shape::Square),
        "circle" => Some(Shape::Circle),
        "bar" => Some(Shape::Bar),
        _ => None,
    };
    match toks.as_slice() {
        ["the", c, "object"] if find_color(c).is_some() => {
            let c = find_color(c).unwrap();
            (0..objs.len()).filter(|&i| objs[i].color == c).collect()
        }
        ["the", c, s] if find_color(c).is_some() && find_shape(s).is_some() => {
            let c = find_color(c).unwrap();
            let s = find_shape(s).unwrap();
            (0..objs.len()).filter(|&i| objs[i].color == c && objs[i].shape == s).collect()
        }
        ["the", m, c, s] if find_color(c).is_some() && find_shape(s).is_some() => {
            let c = find_color(c).unwrap();
            let s = find_shape(s).unwrap();
            (0..objs.len())
                .filter(|&i| {
                    objs[i].color == c && objs[i].shape == s && objs[i].mod_word() == *m
                })
                .collect()
        }
        ["the", sup @ ("largest" | "smallest"), rest] => {
            let set: Vec<usize> = if *rest == "object" {
                (0..objs.len()).collect()
            } else if let Some(s) = find_shape(rest) {
                shape_set(scene, s)
            } else {
                return vec![];
            };
            if set.len() < 2 {
                return vec![];
            }
            unique_extreme(&set, &areas, *sup == "largest").into_iter().collect()
        }
        ["the", side @ ("leftmost" | "rightmost" | "topmost" | "bottommost"), rest] => {
            let set: Vec<usize> = if *rest == "object" {
                (0..objs.len()).collect()
            } else if let Some(s) = find_shape(rest) {
                shape_set(scene, s)
            } else {
                return vec![];
            };
            if set.len() < 2 {
                return vec![];
            }
            let key: Vec<usize> = match *side {
                "leftmost" | "rightmost" => objs.iter().map(|o| o.cx2()).collect(),
                _ => objs.iter().map(|o| o.cy2()).collect(),
            };
            let max = matches!(*side, "rightmost" | "bottommost");
            unique_extreme(&set, &key, max).into_iter().collect()
        }
        _ => vec![],
    }
}

/// Every expression that resolves to exactly one object, in a fixed
/// enumeration order. obj_id is 1-based.
pub fn enumerate_refexps(scene: &Scene) -> Vec<RefCandidate> {
    let mut texts = Vec::new();
    for o in &scene.objects {
        texts.push(format!("the {} object", COLORS[o.color]));
        texts.push(format!("the {} {}", COLORS[o.color], o.shape.word()));
        texts.push(format!("the {} {} {}", o.mod_word(), COLORS[o.color], o.shape.word()));
    }
    for sup in ["largest", "smallest", "leftmost", "rightmost", "topmost", "bottommost"] {
        texts.push(format!("the {sup} object"));
        for s in SHAPES {
            texts.push(format!("the {sup} {s}"));
        }
    }
    let mut out = Vec::new();
    for t in texts {
        let matches = resolve_refexp(scene, &t);
        if matches.len() == 1 {
            out.push(RefCandidate { expression: t, obj_id: matches[0] + 1 });
        }
    }
    out.dedup_by(|a, b| a.expression == b.expression);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

pub const RELATIONS: [Relation; 4] =
    [Relation::LeftOf, Relation::RightOf, Relation::Above, Relation::Below];

impl Relation {
    pub fn words(self) -> &'static str {
        match self {
            Relation::LeftOf => "left of",
            Relation::RightOf => "right of",
            Relation::Above => "above",
            Relation::Below => "below",
        }
    }

    fn holds(self, scene: &Scene, obj: usize, anchor: usize) -> bool {
        let (o, a) = (&scene.objects[obj], &scene.objects[anchor]);
        match self {
            Relation::LeftOf => o.cx2() < a.cx2(),
            Relation::RightOf => o.cx2() > a.cx2(),
            Relation::Above => o.cy2() < a.cy2(),
            Relation::Below => o.cy2() > a.cy2(),
        }
    }
}

/// A reasoning QA pair. The answer carries the referent's marker inline;
/// obj_ids lists the marker indices in answer order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReasoningCandidate {
    pub question: String,
    pub answer: String,
    pub obj_ids: Vec<usize>,
}

/// Every relational question whose referent is unique, in fixed order.
/// Questions describe only the anchor; colors are unique per scene, so the
/// referent's (color, shape) pair can never both appear in the question and
/// the answer stays undeterminable from text alone.
pub fn enumerate_reasoning(scene: &Scene) -> Vec<ReasoningCandidate> {
    let n = scene.objects.len();
    let mut out = Vec::new();
    if n < 2 {
        return out;
    }
    for anchor in 0..n {
        let a = &scene.objects[anchor];
        let a_color = COLORS[a.color];
        let a_shape = a.shape.word();
        for rel in RELATIONS {
            let set: Vec<usize> =
                (0..n).filter(|&i| i != anchor && rel.holds(scene, i, anchor)).collect();
            if set.len() != 1 {
                continue;
            }
            let r = &scene.objects[set[0]];
            let marker = obj_marker(set[0] + 1);
            let r_color = COLORS[r.color];
            let r_shape = r.shape.word();
            let rel_w = rel.words();
            out.push(ReasoningCandidate {
                question: format!("which object is {rel_w} the {a_color} {a_shape}"),
                answer: format!("the {r_color} {r_shape} {marker}"),
                obj_ids: vec![set[0] + 1],
            });
            out.push(ReasoningCandidate {
                question: format!("what shape is the object {rel_w} the {a_color} object"),
                answer: format!("it is a {r_shape} {marker}"),
                obj_ids: vec![set[0] + 1],
            });
            out.push(ReasoningCandidate {
                question: format!("what color is the object {rel_w} the {a_color} {a_shape}"),
                answer: format!("it is {r_color} {marker}"),
                obj_ids: vec![set[0] + 1],
            });
        }
        // Shape-sharing question: valid when exactly one other object has
        // the anchor's shape.
        let same: Vec<usize> =
            (0..n).filter(|&i| i != anchor && scene.objects[i].shape == a.shape).collect();
        if same.len() == 1 {
            let r = &scene.objects[same[0]];
            out.push(ReasoningCandidate {
                question: format!("which object is the same shape as the {a_color} object"),
                answer: format!("the {} {} {}", COLORS[r.color], r.shape.word(), obj_marker(same[0] + 1)),
                obj_ids: vec![same[0] + 1],
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Object;

    fn two_object_scene() -> Scene {
        // red small square TL, blue large circle TR
        Scene {
            objects: vec![
                Object { shape: Shape::Square, color: 0, x: 0, y: 0, w: 8, h: 8 },
                Object { shape: Shape::Circle, color: 2, x: 16, y: 0, w: 16, h: 16 },
            ],
        }
    }

    #[test]
    fn caption_lists_objects_in_order() {
        let s = two_object_scene();
        assert_eq!(
            caption(&s),
            "a scene with two objects a small red square and a large blue circle"
        );
    }

    #[test]
    fn color_refexp_resolves_uniquely() {
        let s = two_object_scene();
        assert_eq!(resolve_refexp(&s, "the red object"), vec![0]);
        assert_eq!(resolve_refexp(&s, "the blue circle"), vec![1]);
        assert_eq!(resolve_refexp(&s, "the green object"), Vec::<usize>::new());
    }

    #[test]
    fn superlatives_require_two_candidates_and_no_tie() {
        let s = two_object_scene();
        // Only one square in the scene: within-shape superlative invalid.
        assert!(resolve_refexp(&s, "the largest square").is_empty());
        // Across all objects the disc (area ~208) beats the 8x8 square.
        assert_eq!(resolve_refexp(&s, "the largest object"), vec![1]);
        assert_eq!(resolve_refexp(&s, "the leftmost object"), vec![0]);
    }

    #[test]
    fn every_enumerated_refexp_is_unique_by_oracle() {
        let s = two_object_scene();
        for cand in enumerate_refexps(&s) {
            let m = resolve_refexp(&s, &cand.expression);
            assert_eq!(m, vec![cand.obj_id - 1], "{}", cand.expression);
        }
    }

    #[test]
    fn reasoning_needs_two_objects() {
        let mut s = two_object_scene();
        assert!(!enumerate_reasoning(&s).is_empty());
        s.objects.truncate(1);
        assert!(enumerate_reasoning(&s).is_empty());
    }

    #[test]
    fn reasoning_answers_carry_exactly_the_listed_markers() {
        let s = two_object_scene();
        for cand in enumerate_reasoning(&s) {
            let markers: Vec<usize> = cand
                .answer
                .split_whitespace()
                .filter_map(crate::lang::parse_obj_marker)
                .collect();
            assert_eq!(markers, cand.obj_ids);
            assert!(cand.question.split_whitespace().all(|t| crate::lang::parse_obj_marker(t).is_none()));
        }
    }
}
