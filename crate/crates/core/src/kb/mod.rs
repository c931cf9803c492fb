//! Knowledge base of extracted entities and relations with provenance.
//!
//! Entities are keyed by (case-folded, whitespace-collapsed surface, type).
//! A relation links two entity keys under a label. Two different labels on
//! the same ordered pair put both relations in `conflict` status; nothing is
//! resolved automatically. Records seen in at least `m` distinct documents
//! are promoted to `verified` by [`KnowledgeBase::verify`].

mod build;
mod persist;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::{normalize_key, normalize_ws};

pub use build::{build_kb, load_documents, BuildReport, Document, EngineExtractor, Extractor, NerComponent, ReComponent, SentenceFailure};
pub use persist::{export_kb, import_kb, KbStore, LogRecord, SNAPSHOT_VERSION};

pub const DEFAULT_MIN_DOCUMENTS: usize = 2;

#[derive(Debug, Error, PartialEq)]
pub enum KbError {
    #[error("scope must admit at least one entity type and one relation label")]
    EmptyScope,
    #[error("entity type '{0}' is outside the knowledge-base scope")]
    TypeOutOfScope(String),
    #[error("relation label '{0}' is outside the knowledge-base scope")]
    LabelOutOfScope(String),
    #[error("entity {0} does not exist")]
    UnknownEntity(EntityKey),
    #[error("entity surface is empty")]
    EmptySurface,
    #[error("snapshot version '{found}' is not supported (expected '{expected}')")]
    Version { found: String, expected: String },
    #[error("corrupt record at line {line}: {message}")]
    Corrupt { line: usize, message: String },
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KbScope {
    pub domain: String,
    pub entity_types: BTreeSet<String>,
    pub relation_labels: BTreeSet<String>,
}

impl KbScope {
    pub fn new(
        domain: impl Into<String>,
        entity_types: impl IntoIterator<Item = impl Into<String>>,
        relation_labels: impl IntoIterator<Item = impl Into<String>>,
    ) -> Result<Self, KbError> {
        let scope = Self {
            domain: domain.into(),
            entity_types: entity_types.into_iter().map(Into::into).collect(),
            relation_labels: relation_labels.into_iter().map(Into::into).collect(),
        };
        scope.validate()?;
        Ok(scope)
    }

    pub fn validate(&self) -> Result<(), KbError> {
        if self.entity_types.is_empty() || self.relation_labels.is_empty() {
            return Err(KbError::EmptyScope);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Provenance {
    pub document_id: String,
    pub sentence_index: usize,
    pub run_id: String,
    pub timestamp: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityKey {
    pub surface: String,
    pub entity_type: String,
}

impl EntityKey {
    pub fn new(surface: &str, entity_type: &str) -> Self {
        Self {
            surface: normalize_key(surface),
            entity_type: entity_type.to_string(),
        }
    }
}

impl fmt::Display for EntityKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.entity_type, self.surface)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityStatus {
    Unverified,
    Verified,
    Flagged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationStatus {
    Unverified,
    Verified,
    Conflict,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KbEntity {
    pub key: EntityKey,
    pub surfaces: BTreeSet<String>,
    pub provenance: Vec<Provenance>,
    pub status: EntityStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationKey {
    pub subject: EntityKey,
    pub object: EntityKey,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KbRelation {
    pub subject: EntityKey,
    pub object: EntityKey,
    pub label: String,
    pub provenance: Vec<Provenance>,
    pub status: RelationStatus,
}

impl KbRelation {
    pub fn key(&self) -> RelationKey {
        RelationKey {
            subject: self.subject.clone(),
            object: self.object.clone(),
            label: self.label.clone(),
        }
    }
}

fn distinct_documents(provenance: &[Provenance]) -> usize {
    provenance
        .iter()
        .map(|p| p.document_id.as_str())
        .collect::<BTreeSet<_>>()
        .len()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub merged: usize,
    pub conflicts: usize,
    pub promoted: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Query {
    Prefix(String),
    ByType(String),
    Neighbors(EntityKey),
    RelationsByLabel(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryResult {
    Entities(Vec<KbEntity>),
    Relations(Vec<KbRelation>),
}

impl QueryResult {
    pub fn len(&self) -> usize {
        match self {
            QueryResult::Entities(v) => v.len(),
            QueryResult::Relations(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeBase {
    pub scope: KbScope,
    pub entities: BTreeMap<EntityKey, KbEntity>,
    pub relations: BTreeMap<RelationKey, KbRelation>,
}

impl KnowledgeBase {
    pub fn new(scope: KbScope) -> Self {
        Self {
            scope,
            entities: BTreeMap::new(),
            relations: BTreeMap::new(),
        }
    }

    pub fn upsert_entity(
        &mut self,
        surface: &str,
        entity_type: &str,
        provenance: Provenance,
    ) -> Result<EntityKey, KbError> {
        if !self.scope.entity_types.contains(entity_type) {
            return Err(KbError::TypeOutOfScope(entity_type.to_string()));
        }
        let surface = normalize_ws(surface);
        if surface.is_empty() {
            return Err(KbError::EmptySurface);
        }
        let key = EntityKey::new(&surface, entity_type);
        let entity = self.entities.entry(key.clone()).or_insert_with(|| KbEntity {
            key: key.clone(),
            surfaces: BTreeSet::new(),
            provenance: Vec::new(),
            status: EntityStatus::Unverified,
        });
        entity.surfaces.insert(surface);
        entity.provenance.push(provenance);
        Ok(key)
    }

    pub fn upsert_relation(
        &mut self,
        subject: &EntityKey,
        object: &EntityKey,
        label: &str,
        provenance: Provenance,
    ) -> Result<RelationKey, KbError> {
        if !self.scope.relation_labels.contains(label) {
            return Err(KbError::LabelOutOfScope(label.to_string()));
        }
        for k in [subject, object] {
            if !self.entities.contains_key(k) {
                return Err(KbError::UnknownEntity(k.clone()));
            }
        }
        let key = RelationKey {
            subject: subject.clone(),
            object: object.clone(),
            label: label.to_string(),
        };
        self.relations
            .entry(key.clone())
            .or_insert_with(|| KbRelation {
                subject: subject.clone(),
                object: object.clone(),
                label: label.to_string(),
                provenance: Vec::new(),
                status: RelationStatus::Unverified,
            })
            .provenance
            .push(provenance);
        self.mark_pair_conflicts(subject, object);
        Ok(key)
    }

    fn pair_keys(&self, subject: &EntityKey, object: &EntityKey) -> Vec<RelationKey> {
        self.relations
            .keys()
            .filter(|k| &k.subject == subject && &k.object == object)
            .cloned()
            .collect()
    }

    fn mark_pair_conflicts(&mut self, subject: &EntityKey, object: &EntityKey) {
        let keys = self.pair_keys(subject, object);
        if keys.len() > 1 {
            for k in keys {
                self.relations.get_mut(&k).expect("key listed").status = RelationStatus::Conflict;
            }
        }
    }

    /// Dangling relation endpoints, empty if the KB is consistent.
    pub fn integrity_violations(&self) -> Vec<RelationKey> {
        self.relations
            .keys()
            .filter(|k| !self.entities.contains_key(&k.subject) || !self.entities.contains_key(&k.object))
            .cloned()
            .collect()
    }

    /// Re-normalizes keys (merging collisions), recounts conflicts, flags
    /// surfaces typed inconsistently, and promotes records with provenance
    /// from at least `min_documents` documents.
    pub fn verify(&mut self, min_documents: usize) -> VerifyReport {
        let mut report = VerifyReport::default();

        let mut entities: BTreeMap<EntityKey, KbEntity> = BTreeMap::new();
        for (_, mut e) in std::mem::take(&mut self.entities) {
            let key = EntityKey::new(&e.key.surface, &e.key.entity_type);
            e.key = key.clone();
            match entities.get_mut(&key) {
                Some(existing) => {
                    report.merged += 1;
                    existing.surfaces.append(&mut e.surfaces);
                    existing.provenance.append(&mut e.provenance);
                }
                None => {
                    entities.insert(key, e);
                }
            }
        }
        self.entities = entities;

        let mut relations: BTreeMap<RelationKey, KbRelation> = BTreeMap::new();
        for (_, mut r) in std::mem::take(&mut self.relations) {
            r.subject = EntityKey::new(&r.subject.surface, &r.subject.entity_type);
            r.object = EntityKey::new(&r.object.surface, &r.object.entity_type);
            match relations.get_mut(&r.key()) {
                Some(existing) => {
                    report.merged += 1;
                    existing.provenance.append(&mut r.provenance);
                }
                None => {
                    relations.insert(r.key(), r);
                }
            }
        }
        self.relations = relations;

        let mut labels_per_pair: BTreeMap<(EntityKey, EntityKey), usize> = BTreeMap::new();
        for k in self.relations.keys() {
            *labels_per_pair
                .entry((k.subject.clone(), k.object.clone()))
                .or_default() += 1;
        }
        for r in self.relations.values_mut() {
            let conflicted = labels_per_pair[&(r.subject.clone(), r.object.clone())] > 1;
            if conflicted {
                r.status = RelationStatus::Conflict;
                report.conflicts += 1;
            } else if distinct_documents(&r.provenance) >= min_documents {
                if r.status != RelationStatus::Verified {
                    r.status = RelationStatus::Verified;
                    report.promoted += 1;
                }
            } else if r.status == RelationStatus::Conflict {
                r.status = RelationStatus::Unverified;
            }
        }

        let mut types_per_surface: BTreeMap<&str, usize> = BTreeMap::new();
        for k in self.entities.keys() {
            *types_per_surface.entry(k.surface.as_str()).or_default() += 1;
        }
        let ambiguous: BTreeSet<String> = types_per_surface
            .into_iter()
            .filter(|(_, n)| *n > 1)
            .map(|(s, _)| s.to_string())
            .collect();
        for e in self.entities.values_mut() {
            if ambiguous.contains(&e.key.surface) {
                e.status = EntityStatus::Flagged;
            } else if distinct_documents(&e.provenance) >= min_documents {
                if e.status != EntityStatus::Verified {
                    e.status = EntityStatus::Verified;
                    report.promoted += 1;
                }
            } else if e.status == EntityStatus::Flagged {
                e.status = EntityStatus::Unverified;
            }
        }
        report
    }

    /// Results are ordered by key.
    pub fn query(&self, query: &Query) -> Result<QueryResult, KbError> {
        Ok(match query {
            Query::Prefix(prefix) => {
                let prefix = normalize_key(prefix);
                QueryResult::Entities(
                    self.entities
                        .values()
                        .filter(|e| e.key.surface.starts_with(&prefix))
                        .cloned()
                        .collect(),
                )
            }
            Query::ByType(t) => QueryResult::Entities(
                self.entities
                    .values()
                    .filter(|e| &e.key.entity_type == t)
                    .cloned()
                    .collect(),
            ),
            Query::Neighbors(key) => {
                if !self.entities.contains_key(key) {
                    return Err(KbError::UnknownEntity(key.clone()));
                }
                QueryResult::Relations(
                    self.relations
                        .values()
                        .filter(|r| &r.subject == key || &r.object == key)
                        .cloned()
                        .collect(),
                )
            }
            Query::RelationsByLabel(label) => QueryResult::Relations(
                self.relations
                    .values()
                    .filter(|r| &r.label == label)
                    .cloned()
                    .collect(),
            ),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scope() -> KbScope {
        KbScope::new("pharmacology", ["drug", "disease"], ["effect", "mechanism"]).unwrap()
    }

    fn prov(doc: &str, i: usize) -> Provenance {
        Provenance {
            document_id: doc.into(),
            sentence_index: i,
            run_id: "run-1".into(),
            timestamp: "2024-01-01T00:00:00Z".into(),
        }
    }

    #[test]
    fn entity_normalization() {
        let mut kb = KnowledgeBase::new(scope());
        let a = kb.upsert_entity("Heart Failure", "disease", prov("d1", 0)).unwrap();
        let b = kb.upsert_entity("heart  failure", "disease", prov("d1", 1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(kb.entities.len(), 1);
        assert_eq!(kb.entities[&a].surfaces.len(), 2);
        assert_eq!(kb.entities[&a].provenance.len(), 2);
        let c = kb.upsert_entity("asthma", "disease", prov("d1", 2)).unwrap();
        assert_ne!(a, c);
        assert_eq!(
            kb.upsert_entity("x", "gene", prov("d1", 0)),
            Err(KbError::TypeOutOfScope("gene".into()))
        );
    }

    #[test]
    fn relation_merge_and_conflict() {
        let mut kb = KnowledgeBase::new(scope());
        let a = kb.upsert_entity("DrugA", "drug", prov("d1", 0)).unwrap();
        let b = kb.upsert_entity("DrugB", "drug", prov("d1", 0)).unwrap();
        let r1 = kb.upsert_relation(&a, &b, "effect", prov("d1", 0)).unwrap();
        kb.upsert_relation(&a, &b, "effect", prov("d2", 0)).unwrap();
        assert_eq!(kb.relations.len(), 1);
        assert_eq!(kb.relations[&r1].provenance.len(), 2);
        assert_eq!(kb.relations[&r1].status, RelationStatus::Unverified);
        let r2 = kb.upsert_relation(&a, &b, "mechanism", prov("d3", 0)).unwrap();
        assert_eq!(kb.relations[&r1].status, RelationStatus::Conflict);
        assert_eq!(kb.relations[&r2].status, RelationStatus::Conflict);
        // Reverse direction is a different pair.
        kb.upsert_relation(&b, &a, "effect", prov("d1", 0)).unwrap();
        assert_eq!(kb.relations.values().filter(|r| r.status == RelationStatus::Conflict).count(), 2);
        let ghost = EntityKey::new("nobody", "drug");
        assert_eq!(
            kb.upsert_relation(&a, &ghost, "effect", prov("d1", 0)),
            Err(KbError::UnknownEntity(ghost))
        );
        assert!(kb.integrity_violations().is_empty());
    }

    #[test]
    fn verify_merges_promotes_and_is_idempotent() {
        let mut kb = KnowledgeBase::new(scope());
        let a = kb.upsert_entity("aspirin", "drug", prov("d1", 0)).unwrap();
        kb.upsert_entity("aspirin", "drug", prov("d2", 0)).unwrap();
        let h = kb.upsert_entity("headache", "disease", prov("d1", 0)).unwrap();
        kb.upsert_relation(&a, &h, "effect", prov("d1", 0)).unwrap();
        kb.upsert_relation(&a, &h, "effect", prov("d2", 0)).unwrap();
        // A record imported without normalization collides with "aspirin".
        let raw = EntityKey {
            surface: "Aspirin".into(),
            entity_type: "drug".into(),
        };
        kb.entities.insert(
            raw.clone(),
            KbEntity {
                key: raw,
                surfaces: BTreeSet::from(["Aspirin".to_string()]),
                provenance: vec![prov("d3", 0)],
                status: EntityStatus::Unverified,
            },
        );
        let first = kb.verify(2);
        assert_eq!(first.merged, 1);
        assert_eq!(first.conflicts, 0);
        assert_eq!(first.promoted, 2); // aspirin entity + relation
        assert_eq!(kb.entities[&a].provenance.len(), 3);
        assert_eq!(kb.entities[&h].status, EntityStatus::Unverified);
        let state = kb.clone();
        let second = kb.verify(2);
        assert_eq!(second, VerifyReport { merged: 0, conflicts: 0, promoted: 0 });
        assert_eq!(kb, state);
    }

    #[test]
    fn verify_flags_multi_typed_surface() {
        let mut kb = KnowledgeBase::new(scope());
        let d = kb.upsert_entity("lithium", "drug", prov("d1", 0)).unwrap();
        kb.upsert_entity("lithium", "disease", prov("d1", 0)).unwrap();
        kb.verify(2);
        assert_eq!(kb.entities[&d].status, EntityStatus::Flagged);
    }

    #[test]
    fn queries() {
        let mut kb = KnowledgeBase::new(scope());
        let a = kb.upsert_entity("hypertension", "disease", prov("d1", 0)).unwrap();
        kb.upsert_entity("Hyperkalemia", "disease", prov("d1", 0)).unwrap();
        let n = kb.upsert_entity("naloxone", "drug", prov("d1", 0)).unwrap();
        let lone = kb.upsert_entity("fever", "disease", prov("d1", 0)).unwrap();
        kb.upsert_relation(&n, &a, "effect", prov("d1", 0)).unwrap();
        let r = kb.query(&Query::Prefix("HYPER".into())).unwrap();
        match r {
            QueryResult::Entities(es) => {
                let keys: Vec<&str> = es.iter().map(|e| e.key.surface.as_str()).collect();
                assert_eq!(keys, ["hyperkalemia", "hypertension"]);
            }
            _ => panic!(),
        }
        assert_eq!(kb.query(&Query::ByType("drug".into())).unwrap().len(), 1);
        assert_eq!(kb.query(&Query::Neighbors(a)).unwrap().len(), 1);
        assert!(kb.query(&Query::Neighbors(lone)).unwrap().is_empty());
        assert!(kb.query(&Query::Neighbors(EntityKey::new("zzz", "drug"))).is_err());
        assert_eq!(kb.query(&Query::RelationsByLabel("effect".into())).unwrap().len(), 1);
    }

    #[test]
    fn empty_scope_rejected() {
        assert_eq!(
            KbScope::new("x", Vec::<String>::new(), ["a"]),
            Err(KbError::EmptyScope)
        );
    }
}
