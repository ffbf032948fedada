//! Static world content: scene entities indexed by a quadtree.
//!
//! Every generation stage inserts into one [`SceneGraph`]. Queries
//! (point, region, collision, nearest-by-category) walk the tree and must
//! agree exactly with a linear scan over all entities.
//!
//! An entity lives in the deepest node whose bounds fully contain its
//! footprint, so straddling entities stay on internal nodes. A leaf splits
//! once it holds more than [`MAX_LEAF_ENTITIES`] and is shallower than
//! [`MAX_DEPTH`]. Ties are always broken by the smallest entity id.

use crate::geometry::{Aabb, Pose2D, Vec2};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

pub const MAX_LEAF_ENTITIES: usize = 8;
pub const MAX_DEPTH: u32 = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntityId(pub u64);

impl std::fmt::Display for EntityId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    RoadSegment,
    Building,
    Vegetation,
    UrbanProp,
    Vehicle,
    Pedestrian,
    Robot,
    Humanoid,
    TrafficSignal,
    GeneratedAsset,
}

impl Category {
    pub const ALL: [Category; 10] = [
        Category::RoadSegment,
        Category::Building,
        Category::Vegetation,
        Category::UrbanProp,
        Category::Vehicle,
        Category::Pedestrian,
        Category::Robot,
        Category::Humanoid,
        Category::TrafficSignal,
        Category::GeneratedAsset,
    ];

    /// Cell value used in semantic rasters; 0 is reserved for empty space.
    pub fn raster_id(self) -> u8 {
        Self::ALL.iter().position(|c| *c == self).unwrap() as u8 + 1
    }

    pub fn from_raster_id(id: u8) -> Option<Category> {
        Self::ALL.get((id as usize).checked_sub(1)?).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::RoadSegment => "road_segment",
            Category::Building => "building",
            Category::Vegetation => "vegetation",
            Category::UrbanProp => "urban_prop",
            Category::Vehicle => "vehicle",
            Category::Pedestrian => "pedestrian",
            Category::Robot => "robot",
            Category::Humanoid => "humanoid",
            Category::TrafficSignal => "traffic_signal",
            Category::GeneratedAsset => "generated_asset",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEntity {
    pub id: EntityId,
    pub category: Category,
    pub pose: Pose2D,
    pub footprint: Aabb,
    #[serde(default)]
    pub tags: BTreeSet<String>,
    pub blocking: bool,
}

impl SceneEntity {
    pub fn new(id: u64, category: Category, pose: Pose2D, footprint: Aabb, blocking: bool) -> Self {
        Self { id: EntityId(id), category, pose, footprint, tags: BTreeSet::new(), blocking }
    }

    pub fn with_tags<I, S>(mut self, tags: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.tags.extend(tags.into_iter().map(Into::into));
        self
    }

    pub fn has_tag(&self, tag: &str) -> bool {
        self.tags.contains(tag)
    }

    pub fn center(&self) -> Vec2 {
        self.footprint.center()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("entity id {0} already present")]
    DuplicateId(EntityId),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("no free placement around anchor {0}")]
    NoFreeSpace(EntityId),
    #[error("footprint of entity {0} is invalid or lies outside the scene extent")]
    OutOfExtent(EntityId),
    #[error("malformed scene document: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone)]
pub struct QuadTreeNode {
    pub bounds: Aabb,
    pub entities: Vec<EntityId>,
    pub children: Option<Box<[QuadTreeNode; 4]>>,
    pub depth: u32,
}

impl QuadTreeNode {
    fn leaf(bounds: Aabb, depth: u32) -> Self {
        Self { bounds, entities: Vec::new(), children: None, depth }
    }

    fn insert(&mut self, id: EntityId, fp: &Aabb, index: &BTreeMap<EntityId, SceneEntity>) {
        if let Some(children) = self.children.as_mut() {
            if let Some(child) = children.iter_mut().find(|c| c.bounds.contains(fp)) {
                child.insert(id, fp, index);
                return;
            }
            self.entities.push(id);
            return;
        }
        self.entities.push(id);
        if self.entities.len() > MAX_LEAF_ENTITIES && self.depth < MAX_DEPTH {
            self.split(index);
        }
    }

    fn split(&mut self, index: &BTreeMap<EntityId, SceneEntity>) {
        let quads = self.bounds.quadrants();
        let d = self.depth + 1;
        self.children = Some(Box::new([
            QuadTreeNode::leaf(quads[0], d),
            QuadTreeNode::leaf(quads[1], d),
            QuadTreeNode::leaf(quads[2], d),
            QuadTreeNode::leaf(quads[3], d),
        ]));
        let held = std::mem::take(&mut self.entities);
        for id in held {
            let fp = index[&id].footprint;
            self.insert(id, &fp, index);
        }
    }

    fn remove(&mut self, id: EntityId, fp: &Aabb) -> bool {
        if let Some(pos) = self.entities.iter().position(|e| *e == id) {
            self.entities.remove(pos);
            return true;
        }
        match self.children.as_mut() {
            Some(children) => children.iter_mut().filter(|c| c.bounds.contains(fp)).any(|c| c.remove(id, fp)),
            None => false,
        }
    }

    fn visit<'a>(&'a self, enter: &mut dyn FnMut(&Aabb) -> bool, f: &mut dyn FnMut(EntityId)) {
        for id in &self.entities {
            f(*id);
        }
        if let Some(children) = &self.children {
            for c in children.iter() {
                if enter(&c.bounds) {
                    c.visit(enter, f);
                }
            }
        }
    }

    fn node_count(&self) -> usize {
        1 + self.children.as_ref().map_or(0, |c| c.iter().map(QuadTreeNode::node_count).sum())
    }
}

/// Which side of a compass offset list an edit should try; clockwise from east.
pub const COMPASS_OFFSETS: [(f64, f64); 8] = [(1.0, 0.0), (1.0, -1.0), (0.0, -1.0), (-1.0, -1.0), (-1.0, 0.0), (-1.0, 1.0), (0.0, 1.0), (1.0, 1.0)];

/// Number of 1 m distance increments an add-edit tries before giving up.
pub const EDIT_DISTANCE_TRIES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub category: Category,
    #[serde(default)]
    pub tag: Option<String>,
}

fn default_size() -> (f64, f64) {
    (1.0, 1.0)
}

fn default_true() -> bool {
    true
}

/// Deterministic scene edit: the grounded form of "add X next to Y".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum SceneEditCommand {
    Add {
        category: Category,
        #[serde(default)]
        tags: BTreeSet<String>,
        anchor: Anchor,
        offset_distance: f64,
        /// Footprint width and height of the new entity.
        #[serde(default = "default_size")]
        size: (f64, f64),
        #[serde(default = "default_true")]
        blocking: bool,
        /// Reference point for resolving the anchor; defaults to the extent center.
        #[serde(default)]
        near: Option<Vec2>,
    },
    Remove {
        id: EntityId,
    },
}

#[derive(Debug, Clone)]
pub struct SceneGraph {
    root: QuadTreeNode,
    index: BTreeMap<EntityId, SceneEntity>,
    extent: Aabb,
}

#[derive(Serialize, Deserialize)]
struct SceneDocument {
    extent: Aabb,
    entities: Vec<SceneEntity>,
}

impl SceneGraph {
    pub fn new(extent: Aabb) -> Self {
        Self { root: QuadTreeNode::leaf(extent, 0), index: BTreeMap::new(), extent }
    }

    pub fn extent(&self) -> Aabb {
        self.extent
    }

    pub fn root(&self) -> &QuadTreeNode {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn node_count(&self) -> usize {
        self.root.node_count()
    }

    pub fn get(&self, id: EntityId) -> Option<&SceneEntity> {
        self.index.get(&id)
    }

    /// Entities in ascending id order.
    pub fn entities(&self) -> impl Iterator<Item = &SceneEntity> {
        self.index.values()
    }

    pub fn next_id(&self) -> EntityId {
        EntityId(self.index.keys().next_back().map_or(1, |k| k.0 + 1))
    }

    pub fn insert(&mut self, e: SceneEntity) -> Result<(), SceneError> {
        if self.index.contains_key(&e.id) {
            return Err(SceneError::DuplicateId(e.id));
        }
        if !e.footprint.is_valid() || !e.footprint.touches(&self.extent) || !e.pose.position().is_finite() {
            return Err(SceneError::OutOfExtent(e.id));
        }
        let id = e.id;
        let fp = e.footprint;
        self.index.insert(id, e);
        self.root.insert(id, &fp, &self.index);
        Ok(())
    }

    pub fn remove(&mut self, id: EntityId) -> Result<SceneEntity, SceneError> {
        let e = self.index.remove(&id).ok_or_else(|| SceneError::NotFound(format!("entity {id}")))?;
        let removed = self.root.remove(id, &e.footprint);
        debug_assert!(removed, "index and tree disagree on {id}");
        Ok(e)
    }

    /// Replaces an entity's pose, footprint and tags, keeping its id.
    pub fn update(&mut self, e: SceneEntity) -> Result<(), SceneError> {
        self.remove(e.id)?;
        self.insert(e)
    }

    /// Entities whose footprint contains `p`, ascending id.
    pub fn query_point(&self, p: Vec2) -> Vec<&SceneEntity> {
        let mut out = Vec::new();
        self.root.visit(&mut |b| b.contains_point(p), &mut |id| {
            let e = &self.index[&id];
            if e.footprint.contains_point(p) {
                out.push(e);
            }
        });
        out.sort_by_key(|e| e.id);
        out
    }

    /// Entities whose footprint touches `region`, ascending id.
    pub fn query_region(&self, region: &Aabb) -> Vec<&SceneEntity> {
        let mut out = Vec::new();
        self.root.visit(&mut |b| b.touches(region), &mut |id| {
            let e = &self.index[&id];
            if e.footprint.touches(region) {
                out.push(e);
            }
        });
        out.sort_by_key(|e| e.id);
        out
    }

    /// Blocking entities (not in `ignore`) overlapping `footprint`, ascending id.
    pub fn colliders(&self, footprint: &Aabb, ignore: &BTreeSet<EntityId>) -> Vec<&SceneEntity> {
        let mut out = Vec::new();
        self.root.visit(&mut |b| b.touches(footprint), &mut |id| {
            let e = &self.index[&id];
            if e.blocking && !ignore.contains(&id) && e.footprint.overlaps(footprint) {
                out.push(e);
            }
        });
        out.sort_by_key(|e| e.id);
        out
    }

    pub fn collides(&self, footprint: &Aabb, ignore: &BTreeSet<EntityId>) -> bool {
        let hit = std::cell::Cell::new(false);
        self.root.visit(&mut |b| !hit.get() && b.touches(footprint), &mut |id| {
            if hit.get() {
                return;
            }
            let e = &self.index[&id];
            hit.set(e.blocking && !ignore.contains(&id) && e.footprint.overlaps(footprint));
        });
        hit.get()
    }

    /// True when `footprint` overlaps any entity of `category`, blocking or not.
    pub fn overlaps_category(&self, footprint: &Aabb, category: Category) -> bool {
        self.query_region(footprint).iter().any(|e| e.category == category && e.footprint.overlaps(footprint))
    }

    /// Matching entity whose footprint center is closest to `from`; ties go
    /// to the smallest id.
    pub fn nearest(&self, from: Vec2, category: Category, tag: Option<&str>) -> Result<&SceneEntity, SceneError> {
        let matches = |e: &SceneEntity| e.category == category && tag.is_none_or(|t| e.has_tag(t));
        let mut best: Option<(f64, EntityId)> = None;
        let mut stack: Vec<&QuadTreeNode> = vec![&self.root];
        while let Some(node) = stack.pop() {
            // Root may hold entities poking out of the extent, so it gets no bound.
            if node.depth > 0 {
                if let Some((bd, _)) = best {
                    if node.bounds.distance_sq_to_point(from) > bd {
                        continue;
                    }
                }
            }
            for id in &node.entities {
                let e = &self.index[id];
                if !matches(e) {
                    continue;
                }
                let d = e.center().dist_sq(from);
                let better = match best {
                    None => true,
                    Some((bd, bid)) => d < bd || (d == bd && *id < bid),
                };
                if better {
                    best = Some((d, *id));
                }
            }
            if let Some(children) = &node.children {
                let mut order: Vec<&QuadTreeNode> = children.iter().collect();
                // Visit the closest child last so it is popped first.
                order.sort_by(|a, b| b.bounds.distance_sq_to_point(from).total_cmp(&a.bounds.distance_sq_to_point(from)));
                stack.extend(order);
            }
        }
        best.map(|(_, id)| &self.index[&id]).ok_or_else(|| {
            SceneError::NotFound(match tag {
                Some(t) => format!("{} tagged {t}", category.as_str()),
                None => category.as_str().to_string(),
            })
        })
    }

    /// Applies an add/remove edit and returns the affected id.
    ///
    /// Adds resolve the anchor with [`SceneGraph::nearest`], then try the eight
    /// compass offsets clockwise from east. The offset is the clear gap
    /// between the anchor footprint and the new footprint along each axis the
    /// direction uses. Each ring widens the gap by 1 m.
    pub fn edit_scene(&mut self, cmd: &SceneEditCommand) -> Result<EntityId, SceneError> {
        match cmd {
            SceneEditCommand::Remove { id } => self.remove(*id).map(|e| e.id),
            SceneEditCommand::Add { category, tags, anchor, offset_distance, size, blocking, near } => {
                let from = near.unwrap_or_else(|| self.extent.center());
                let anchor_e = self.nearest(from, anchor.category, anchor.tag.as_deref())?.clone();
                let fp = self
                    .placement_candidates(&anchor_e.footprint, *size, *offset_distance)
                    .into_iter()
                    .find(|c| self.extent.contains(c) && !self.collides(c, &BTreeSet::new()))
                    .ok_or(SceneError::NoFreeSpace(anchor_e.id))?;
                let id = self.next_id();
                let c = fp.center();
                let yaw = c.sub(anchor_e.center()).angle();
                let mut e = SceneEntity::new(id.0, *category, Pose2D::at(c, yaw), fp, *blocking);
                e.tags = tags.clone();
                self.insert(e)?;
                Ok(id)
            }
        }
    }

    /// Candidate footprints for an add-edit in trial order.
    pub fn placement_candidates(&self, anchor: &Aabb, size: (f64, f64), offset: f64) -> Vec<Aabb> {
        let ac = anchor.center();
        let (ahw, ahh) = (anchor.width() / 2.0, anchor.height() / 2.0);
        let (nhw, nhh) = (size.0 / 2.0, size.1 / 2.0);
        let mut out = Vec::with_capacity(EDIT_DISTANCE_TRIES * COMPASS_OFFSETS.len());
        for k in 0..EDIT_DISTANCE_TRIES {
            let d = offset + k as f64;
            for (dx, dy) in COMPASS_OFFSETS {
                let c = Vec2::new(ac.x + dx * (ahw + nhw + d), ac.y + dy * (ahh + nhh + d));
                out.push(Aabb::from_center(c, nhw, nhh));
            }
        }
        out
    }

    /// Verifies tiling, footprint-bounds intersection, depth and index/tree agreement.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut seen = BTreeSet::new();
        let mut stack = vec![&self.root];
        while let Some(n) = stack.pop() {
            if n.depth > MAX_DEPTH {
                return Err(format!("node deeper than {MAX_DEPTH}"));
            }
            for id in &n.entities {
                let e = self.index.get(id).ok_or_else(|| format!("tree holds unknown id {id}"))?;
                if !e.footprint.touches(&n.bounds) {
                    return Err(format!("entity {id} does not intersect its node"));
                }
                if n.depth > 0 && !n.bounds.contains(&e.footprint) {
                    return Err(format!("entity {id} not contained by its non-root node"));
                }
                if !seen.insert(*id) {
                    return Err(format!("entity {id} stored twice"));
                }
            }
            if let Some(children) = &n.children {
                let q = n.bounds.quadrants();
                for (c, b) in children.iter().zip(q.iter()) {
                    if c.bounds != *b || c.depth != n.depth + 1 {
                        return Err("children do not tile parent".into());
                    }
                    stack.push(c);
                }
            }
        }
        if seen.len() != self.index.len() || !self.index.keys().all(|k| seen.contains(k)) {
            return Err("index and tree disagree".into());
        }
        Ok(())
    }

    /// Canonical JSON: extent then entities sorted by id. The tree is not stored.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&SceneDocument { extent: self.extent, entities: self.index.values().cloned().collect() }).expect("scene serializes")
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(SceneDocument { extent: self.extent, entities: self.index.values().cloned().collect() }).expect("scene serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, SceneError> {
        let doc: SceneDocument = serde_json::from_str(s).map_err(|e| SceneError::Malformed(e.to_string()))?;
        Self::from_document(doc)
    }

    pub fn from_value(v: serde_json::Value) -> Result<Self, SceneError> {
        let doc: SceneDocument = serde_json::from_value(v).map_err(|e| SceneError::Malformed(e.to_string()))?;
        Self::from_document(doc)
    }

    fn from_document(doc: SceneDocument) -> Result<Self, SceneError> {
        let mut g = SceneGraph::new(doc.extent);
        for e in doc.entities {
            g.insert(e)?;
        }
        Ok(g)
    }
}

impl Serialize for SceneGraph {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        SceneDocument { extent: self.extent, entities: self.index.values().cloned().collect() }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for SceneGraph {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let doc = SceneDocument::deserialize(d)?;
        SceneGraph::from_document(doc).map_err(serde::de::Error::custom)
    }
}
