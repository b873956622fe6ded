//! Synthetic universe of entities, relations with cardinality classes, and
//! facts, plus the template renderers that turn facts into training text.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::vocab::Vocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Cardinality {
    OneToOne,
    OneToMany,
    ManyToOne,
    ManyToMany,
}

pub const ALL_CARDINALITIES: [Cardinality; 4] = [
    Cardinality::OneToOne,
    Cardinality::OneToMany,
    Cardinality::ManyToOne,
    Cardinality::ManyToMany,
];

impl Cardinality {
    pub fn as_str(&self) -> &'static str {
        match self {
            Cardinality::OneToOne => "one-to-one",
            Cardinality::OneToMany => "one-to-many",
            Cardinality::ManyToOne => "many-to-one",
            Cardinality::ManyToMany => "many-to-many",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "one-to-one" => Ok(Cardinality::OneToOne),
            "one-to-many" => Ok(Cardinality::OneToMany),
            "many-to-one" => Ok(Cardinality::ManyToOne),
            "many-to-many" => Ok(Cardinality::ManyToMany),
            other => Err(Error::Schema(format!("unknown cardinality {other:?}"))),
        }
    }

    /// Reverse question answering needs a unique subject for a given object,
    /// which only these classes guarantee.
    pub fn supports_reverse_qa(&self) -> bool {
        matches!(self, Cardinality::OneToOne | Cardinality::OneToMany)
    }
}

impl fmt::Display for Cardinality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A relation with its templates: forward templates take the subject in the
/// `{}` slot and are answered by the object; inverse templates take the
/// object and are answered by the subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationSchema {
    pub id: String,
    pub cardinality: Cardinality,
    pub forward_templates: Vec<String>,
    pub inverse_templates: Vec<String>,
    pub forward_phrase: String,
    pub inverse_phrase: String,
}

impl RelationSchema {
    pub fn validate(&self) -> Result<()> {
        if self.forward_templates.len() < 3 {
            return Err(Error::Schema(format!(
                "relation {} needs at least 3 forward templates",
                self.id
            )));
        }
        if self.inverse_templates.len() < 2 {
            return Err(Error::Schema(format!(
                "relation {} needs at least 2 inverse templates",
                self.id
            )));
        }
        for t in self.forward_templates.iter().chain(&self.inverse_templates) {
            if t.matches("{}").count() != 1 {
                return Err(Error::Schema(format!(
                    "template {t:?} of relation {} must contain exactly one {{}} slot",
                    self.id
                )));
            }
        }
        let fwd: HashSet<&String> = self.forward_templates.iter().collect();
        if self.inverse_templates.iter().any(|t| fwd.contains(t)) {
            return Err(Error::Schema(format!(
                "relation {} has overlapping forward and inverse templates",
                self.id
            )));
        }
        Ok(())
    }
}

/// One fact: subject, relation, object.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

impl fmt::Display for Triple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.subject, self.relation, self.object)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub entities: Vec<String>,
    pub relations: Vec<RelationSchema>,
    pub facts: BTreeMap<String, Vec<Triple>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// A rendered prompt and the answer text that should follow it.
#[derive(Debug, Clone, PartialEq)]
pub struct Statement {
    pub prompt: String,
    pub answer: String,
}

impl World {
    pub fn schema(&self, relation: &str) -> Result<&RelationSchema> {
        self.relations
            .iter()
            .find(|r| r.id == relation)
            .ok_or_else(|| Error::Schema(format!("unknown relation {relation:?}")))
    }

    pub fn facts_of(&self, relation: &str) -> &[Triple] {
        self.facts.get(relation).map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub fn all_facts(&self) -> impl Iterator<Item = &Triple> {
        self.relations
            .iter()
            .flat_map(|r| self.facts_of(&r.id).iter())
    }

    /// Distinct subjects of a relation, in fact order.
    pub fn subjects_of(&self, relation: &str) -> Vec<&str> {
        let mut seen = BTreeSet::new();
        self.facts_of(relation)
            .iter()
            .filter(|t| seen.insert(t.subject.as_str()))
            .map(|t| t.subject.as_str())
            .collect()
    }

    /// Distinct objects of a relation, in fact order.
    pub fn objects_of(&self, relation: &str) -> Vec<&str> {
        let mut seen = BTreeSet::new();
        self.facts_of(relation)
            .iter()
            .filter(|t| seen.insert(t.object.as_str()))
            .map(|t| t.object.as_str())
            .collect()
    }

    /// Short content hash identifying this world.
    pub fn id(&self) -> String {
        let mut h = Sha256::new();
        h.update(save_world(self).as_bytes());
        hex_prefix(&h.finalize(), 12)
    }

    /// Check every structural invariant; returns the first violation.
    pub fn validate(&self) -> Result<()> {
        let entity_set: HashSet<&str> = self.entities.iter().map(|s| s.as_str()).collect();
        if entity_set.len() != self.entities.len() {
            return Err(Error::InvariantViolation("duplicate entity names".into()));
        }
        for r in &self.relations {
            r.validate()?;
        }
        for (rel_id, facts) in &self.facts {
            let schema = self.schema(rel_id)?;
            let mut seen_pairs = HashSet::new();
            let mut subject_count: HashMap<&str, usize> = HashMap::new();
            let mut object_count: HashMap<&str, usize> = HashMap::new();
            for t in facts {
                if t.relation != *rel_id {
                    return Err(Error::InvariantViolation(format!(
                        "fact {t} filed under relation {rel_id}"
                    )));
                }
                if t.subject == t.object {
                    return Err(Error::InvariantViolation(format!(
                        "fact {t} relates an entity to itself"
                    )));
                }
                if !entity_set.contains(t.subject.as_str()) || !entity_set.contains(t.object.as_str())
                {
                    return Err(Error::InvariantViolation(format!(
                        "fact {t} references an undeclared entity"
                    )));
                }
                if !seen_pairs.insert((t.subject.as_str(), t.object.as_str())) {
                    return Err(Error::InvariantViolation(format!("duplicate fact {t}")));
                }
                *subject_count.entry(t.subject.as_str()).or_default() += 1;
                *object_count.entry(t.object.as_str()).or_default() += 1;
            }
            let subject_unique = subject_count.values().all(|&c| c <= 1);
            let object_unique = object_count.values().all(|&c| c <= 1);
            let violation = match schema.cardinality {
                Cardinality::OneToOne => {
                    if !subject_unique || !object_unique {
                        Some("a repeated subject or object")
                    } else {
                        None
                    }
                }
                Cardinality::OneToMany => {
                    if !object_unique {
                        Some("an object with multiple subjects")
                    } else {
                        None
                    }
                }
                Cardinality::ManyToOne => {
                    if !subject_unique {
                        Some("a subject with multiple objects")
                    } else {
                        None
                    }
                }
                Cardinality::ManyToMany => None,
            };
            if let Some(kind) = violation {
                let offender = find_cardinality_offender(schema.cardinality, facts);
                return Err(Error::InvariantViolation(format!(
                    "{} relation {rel_id} has {kind}: {offender}",
                    schema.cardinality
                )));
            }
        }
        Ok(())
    }
}

fn find_cardinality_offender(card: Cardinality, facts: &[Triple]) -> String {
    let mut subjects = HashSet::new();
    let mut objects = HashSet::new();
    for t in facts {
        let dup_subject = !subjects.insert(t.subject.as_str());
        let dup_object = !objects.insert(t.object.as_str());
        let bad = match card {
            Cardinality::OneToOne => dup_subject || dup_object,
            Cardinality::OneToMany => dup_object,
            Cardinality::ManyToOne => dup_subject,
            Cardinality::ManyToMany => false,
        };
        if bad {
            return t.to_string();
        }
    }
    "<none>".into()
}

fn hex_prefix(bytes: &[u8], n: usize) -> String {
    bytes
        .iter()
        .flat_map(|b| [b >> 4, b & 0xf])
        .take(n)
        .map(|d| char::from_digit(d as u32, 16).unwrap())
        .collect()
}

// ---------------------------------------------------------------------------
// Built-in relation bank
// ---------------------------------------------------------------------------

fn schema(
    id: &str,
    card: Cardinality,
    fwd: [&str; 3],
    inv: [&str; 2],
    fwd_phrase: &str,
    inv_phrase: &str,
) -> RelationSchema {
    RelationSchema {
        id: id.into(),
        cardinality: card,
        forward_templates: fwd.iter().map(|s| s.to_string()).collect(),
        inverse_templates: inv.iter().map(|s| s.to_string()).collect(),
        forward_phrase: fwd_phrase.into(),
        inverse_phrase: inv_phrase.into(),
    }
}

/// Authored template bank: two relations per cardinality class.
pub fn builtin_relations() -> Vec<RelationSchema> {
    vec![
        schema(
            "rules",
            Cardinality::OneToOne,
            [
                "{} is the ruler of",
                "{} holds the throne of",
                "the realm that {} commands is",
            ],
            ["{} is ruled by", "the ruler of {} is"],
            "is the ruler of",
            "is ruled by",
        ),
        schema(
            "capital",
            Cardinality::OneToOne,
            [
                "{} is the capital of",
                "{} serves as the capital of",
                "the realm whose capital is {} is named",
            ],
            ["the capital of {} is", "{} has as its capital"],
            "is the capital of",
            "has as its capital",
        ),
        schema(
            "forged",
            Cardinality::OneToMany,
            [
                "the smith {} forged",
                "{} is the maker of",
                "the artifact crafted by {} is",
            ],
            ["{} was forged by", "the maker of {} is"],
            "forged",
            "was forged by",
        ),
        schema(
            "mentors",
            Cardinality::OneToMany,
            [
                "{} is the mentor of",
                "the pupil guided by {} is",
                "{} personally trains",
            ],
            ["{} studies under", "the mentor of {} is"],
            "is the mentor of",
            "studies under",
        ),
        schema(
            "serves",
            Cardinality::ManyToOne,
            [
                "{} pledges loyalty to",
                "the lord served by {} is",
                "{} fights under the banner of",
            ],
            ["a warrior sworn to {} is", "one knight serving {} is"],
            "serves",
            "is served by",
        ),
        schema(
            "hails",
            Cardinality::ManyToOne,
            [
                "{} hails from",
                "the homeland of {} is",
                "{} was born in the region of",
            ],
            ["a native of {} is", "one citizen of {} is"],
            "hails from",
            "is the homeland of",
        ),
        schema(
            "trades",
            Cardinality::ManyToMany,
            [
                "{} trades goods with",
                "the partner trading with {} is",
                "{} exchanges wares with",
            ],
            ["{} receives caravans from", "one trader supplying {} is"],
            "trades with",
            "receives caravans from",
        ),
        schema(
            "allies",
            Cardinality::ManyToMany,
            [
                "{} is allied with",
                "the sworn ally of {} is",
                "{} stands beside",
            ],
            ["{} counts among its allies", "one ally of {} is"],
            "is allied with",
            "counts among its allies",
        ),
    ]
}

/// Words used by judgment rendering.
pub const JUDGMENT_PREFIX: &str = "Whether";
pub const QUESTION_MARK: &str = "?";

/// Every non-entity word the built-in world can emit.
fn template_words(relations: &[RelationSchema]) -> BTreeSet<String> {
    let mut words = BTreeSet::new();
    for r in relations {
        for t in r.forward_templates.iter().chain(&r.inverse_templates) {
            for w in t.replace("{}", " ").split_whitespace() {
                words.insert(w.to_string());
            }
        }
        for w in r.forward_phrase.split_whitespace() {
            words.insert(w.to_string());
        }
        for w in r.inverse_phrase.split_whitespace() {
            words.insert(w.to_string());
        }
    }
    words.insert(JUDGMENT_PREFIX.into());
    words.insert(QUESTION_MARK.into());
    // "is" backs the essence prompt used by value optimization
    words.insert("is".into());
    words
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

const SYLLABLES: [&str; 20] = [
    "ba", "ke", "li", "mo", "ru", "sa", "ti", "vo", "ne", "da", "pu", "go", "fi", "ze", "ycha",
    "dro", "klu", "pra", "sto", "gre",
];

fn entity_name(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(2..=3);
    (0..n)
        .map(|_| SYLLABLES[rng.gen_range(0..SYLLABLES.len())])
        .collect()
}

/// Deterministically generate a world honoring every cardinality invariant.
pub fn gen_world(
    seed: u64,
    n_entities: usize,
    relations_per_class: usize,
    facts_per_relation: usize,
) -> Result<World> {
    if n_entities == 0 || relations_per_class == 0 || facts_per_relation == 0 {
        return Err(Error::Construction("all generation counts must be positive".into()));
    }
    let bank = builtin_relations();
    let per_class_available = bank.len() / ALL_CARDINALITIES.len();
    if relations_per_class > per_class_available {
        return Err(Error::Construction(format!(
            "template bank provides {per_class_available} relations per class, {relations_per_class} requested"
        )));
    }
    let relations: Vec<RelationSchema> = ALL_CARDINALITIES
        .iter()
        .flat_map(|card| {
            bank.iter()
                .filter(|r| r.cardinality == *card)
                .take(relations_per_class)
                .cloned()
                .collect::<Vec<_>>()
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let forbidden = template_words(&relations);
    let mut entities = Vec::with_capacity(n_entities);
    let mut seen = HashSet::new();
    while entities.len() < n_entities {
        let name = entity_name(&mut rng);
        if forbidden.contains(&name) || !seen.insert(name.clone()) {
            continue;
        }
        entities.push(name);
    }

    let mut facts = BTreeMap::new();
    for schema in &relations {
        let triples = gen_facts(&mut rng, schema, &entities, facts_per_relation)?;
        facts.insert(schema.id.clone(), triples);
    }

    let world = World {
        entities,
        relations,
        facts,
    };
    world.validate()?;
    Ok(world)
}

fn gen_facts(
    rng: &mut ChaCha8Rng,
    schema: &RelationSchema,
    entities: &[String],
    count: usize,
) -> Result<Vec<Triple>> {
    let n = entities.len();
    let mut shuffled: Vec<&String> = entities.iter().collect();
    shuffled.shuffle(rng);
    let fact = |s: &String, o: &String| Triple {
        subject: s.clone(),
        relation: schema.id.clone(),
        object: o.clone(),
    };
    let infeasible = |need: usize| {
        Error::Construction(format!(
            "relation {} ({}) needs {need} entities for {count} facts but only {n} exist",
            schema.id, schema.cardinality
        ))
    };
    match schema.cardinality {
        Cardinality::OneToOne => {
            if 2 * count > n {
                return Err(infeasible(2 * count));
            }
            Ok((0..count)
                .map(|i| fact(shuffled[2 * i], shuffled[2 * i + 1]))
                .collect())
        }
        Cardinality::OneToMany | Cardinality::ManyToOne => {
            // the "many" side gets `count` distinct entities, the "one" side
            // a pool of about half as many, cycled
            let pool = (count / 2).max(2).min(count);
            if pool + count > n {
                return Err(infeasible(pool + count));
            }
            let ones = &shuffled[..pool];
            let manys = &shuffled[pool..pool + count];
            Ok((0..count)
                .map(|i| {
                    let one = ones[i % pool];
                    let many = manys[i];
                    match schema.cardinality {
                        Cardinality::OneToMany => fact(one, many),
                        _ => fact(many, one),
                    }
                })
                .collect())
        }
        Cardinality::ManyToMany => {
            if n < 2 {
                return Err(infeasible(2));
            }
            let mut pairs = HashSet::new();
            let mut out = Vec::with_capacity(count);
            let mut attempts = 0;
            while out.len() < count {
                attempts += 1;
                if attempts > 1000 * count {
                    return Err(infeasible(count));
                }
                let s = &entities[rng.gen_range(0..n)];
                let o = &entities[rng.gen_range(0..n)];
                if s == o || !pairs.insert((s.clone(), o.clone())) {
                    continue;
                }
                out.push(fact(s, o));
            }
            Ok(out)
        }
    }
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

/// Render a fact through a template. Forward templates take the subject and
/// are answered by the object; inverse templates swap the roles.
pub fn render_statement(
    triple: &Triple,
    direction: Direction,
    template_index: usize,
    schemas: &World,
) -> Result<Statement> {
    let schema = schemas.schema(&triple.relation)?;
    let (templates, slot, answer) = match direction {
        Direction::Forward => (&schema.forward_templates, &triple.subject, &triple.object),
        Direction::Inverse => (&schema.inverse_templates, &triple.object, &triple.subject),
    };
    let template = templates.get(template_index).ok_or_else(|| {
        Error::Schema(format!(
            "template index {template_index} out of range for relation {} ({:?})",
            triple.relation, direction
        ))
    })?;
    Ok(Statement {
        prompt: template.replace("{}", slot),
        answer: answer.clone(),
    })
}

/// Yes/no question asking whether `(s_candidate, relation, o_entity)` holds,
/// phrased in the inverse direction: "Whether {o} {inverse phrase} {s} ?".
pub fn render_judgment(
    o_entity: &str,
    relation: &str,
    s_candidate: &str,
    schemas: &World,
) -> Result<String> {
    let schema = schemas.schema(relation)?;
    Ok(format!(
        "{JUDGMENT_PREFIX} {o_entity} {} {s_candidate} {QUESTION_MARK}",
        schema.inverse_phrase
    ))
}

/// Training corpus: for every fact, every forward and inverse statement,
/// one judgment answered yes, and one judgment with a foil subject answered
/// no. Deterministic for a fixed seed.
pub fn render_corpus(world: &World, seed: u64) -> Result<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lines = Vec::new();
    for schema in &world.relations {
        let facts = world.facts_of(&schema.id);
        let subjects = world.subjects_of(&schema.id);
        // subjects truly related to each object; foils must avoid all of them
        let mut true_subjects: HashMap<&str, HashSet<&str>> = HashMap::new();
        for t in facts {
            true_subjects
                .entry(t.object.as_str())
                .or_default()
                .insert(t.subject.as_str());
        }
        for t in facts {
            for i in 0..schema.forward_templates.len() {
                let s = render_statement(t, Direction::Forward, i, world)?;
                lines.push(format!("{} {}", s.prompt, s.answer));
            }
            for i in 0..schema.inverse_templates.len() {
                let s = render_statement(t, Direction::Inverse, i, world)?;
                lines.push(format!("{} {}", s.prompt, s.answer));
            }
            lines.push(format!(
                "{} yes",
                render_judgment(&t.object, &t.relation, &t.subject, world)?
            ));
            let truth = &true_subjects[t.object.as_str()];
            let foils: Vec<&&str> = subjects.iter().filter(|s| !truth.contains(*s)).collect();
            let foil = foils
                .choose(&mut rng)
                .ok_or_else(|| {
                    Error::Construction(format!(
                        "relation {} has no foil subject for object {}",
                        schema.id, t.object
                    ))
                })?;
            lines.push(format!(
                "{} no",
                render_judgment(&t.object, &t.relation, foil, world)?
            ));
        }
    }
    Ok(lines)
}

/// Closed vocabulary covering everything the world can render.
pub fn vocab_for_world(world: &World) -> Vocab {
    let mut words: Vec<String> = world.entities.clone();
    words.extend(template_words(&world.relations));
    Vocab::new(words)
}

// ---------------------------------------------------------------------------
// World file format
// ---------------------------------------------------------------------------

/// Line-oriented text format: `entity` lines, then `relation` declarations,
/// then `fact` lines.
pub fn save_world(world: &World) -> String {
    let mut out = String::new();
    for e in &world.entities {
        out.push_str(&format!("entity {e}\n"));
    }
    for r in &world.relations {
        out.push_str(&format!(
            "relation {} {} | {} | {} | {} ;; {}\n",
            r.id,
            r.cardinality,
            r.forward_templates.join(" ;; "),
            r.inverse_templates.join(" ;; "),
            r.forward_phrase,
            r.inverse_phrase,
        ));
    }
    for r in &world.relations {
        for t in world.facts_of(&r.id) {
            out.push_str(&format!("fact {} {} {}\n", t.subject, t.relation, t.object));
        }
    }
    out
}

/// Parse and validate a world file; rejects cardinality violations.
pub fn load_world(text: &str) -> Result<World> {
    let mut entities = Vec::new();
    let mut relations: Vec<RelationSchema> = Vec::new();
    let mut facts: BTreeMap<String, Vec<Triple>> = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let err = |message: String| Error::Parse {
            line: idx + 1,
            message,
        };
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (kind, rest) = line.split_once(' ').ok_or_else(|| err("missing payload".into()))?;
        match kind {
            "entity" => entities.push(rest.trim().to_string()),
            "relation" => {
                let mut fields = rest.split('|').map(str::trim);
                let head = fields.next().ok_or_else(|| err("missing relation head".into()))?;
                let (id, card) = head
                    .split_once(' ')
                    .ok_or_else(|| err("relation head needs `<id> <cardinality>`".into()))?;
                let fwd = fields
                    .next()
                    .ok_or_else(|| err("missing forward templates".into()))?;
                let inv = fields
                    .next()
                    .ok_or_else(|| err("missing inverse templates".into()))?;
                let phrases = fields.next().ok_or_else(|| err("missing phrases".into()))?;
                let split_templates = |s: &str| -> Vec<String> {
                    s.split(";;").map(|t| t.trim().to_string()).collect()
                };
                let phrase_parts: Vec<String> = split_templates(phrases);
                if phrase_parts.len() != 2 {
                    return Err(err("phrases field needs `forward ;; inverse`".into()));
                }
                relations.push(RelationSchema {
                    id: id.trim().to_string(),
                    cardinality: Cardinality::parse(card.trim())?,
                    forward_templates: split_templates(fwd),
                    inverse_templates: split_templates(inv),
                    forward_phrase: phrase_parts[0].clone(),
                    inverse_phrase: phrase_parts[1].clone(),
                });
            }
            "fact" => {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                if parts.len() != 3 {
                    return Err(err(format!("fact needs `<s> <r> <o>`, got {rest:?}")));
                }
                facts.entry(parts[1].to_string()).or_default().push(Triple {
                    subject: parts[0].to_string(),
                    relation: parts[1].to_string(),
                    object: parts[2].to_string(),
                });
            }
            other => return Err(err(format!("unknown line kind {other:?}"))),
        }
    }
    for r in &relations {
        facts.entry(r.id.clone()).or_default();
    }
    for rel_id in facts.keys() {
        if !relations.iter().any(|r| &r.id == rel_id) {
            return Err(Error::Schema(format!("facts reference undeclared relation {rel_id}")));
        }
    }
    let world = World {
        entities,
        relations,
        facts,
    };
    world.validate()?;
    Ok(world)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_world() -> World {
        gen_world(7, 60, 2, 12).unwrap()
    }

    #[test]
    fn gen_world_has_two_relations_per_class() {
        let w = small_world();
        assert_eq!(w.relations.len(), 8);
        for card in ALL_CARDINALITIES {
            let n = w.relations.iter().filter(|r| r.cardinality == card).count();
            assert_eq!(n, 2, "{card}");
        }
    }

    #[test]
    fn one_to_one_has_no_repeats() {
        let w = small_world();
        for r in w.relations.iter().filter(|r| r.cardinality == Cardinality::OneToOne) {
            let facts = w.facts_of(&r.id);
            let subjects: HashSet<_> = facts.iter().map(|t| &t.subject).collect();
            let objects: HashSet<_> = facts.iter().map(|t| &t.object).collect();
            assert_eq!(subjects.len(), facts.len());
            assert_eq!(objects.len(), facts.len());
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_world(42, 50, 1, 8).unwrap();
        let b = gen_world(42, 50, 1, 8).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cardinality_invariants_hold_by_exhaustive_scan() {
        let w = gen_world(3, 120, 2, 50).unwrap();
        w.validate().unwrap();
    }

    #[test]
    fn render_forward_and_inverse_swap_roles() {
        let w = small_world();
        let t = &w.facts_of("rules")[0];
        let fwd = render_statement(t, Direction::Forward, 0, &w).unwrap();
        assert_eq!(fwd.prompt, format!("{} is the ruler of", t.subject));
        assert_eq!(fwd.answer, t.object);
        let inv = render_statement(t, Direction::Inverse, 0, &w).unwrap();
        assert_eq!(inv.prompt, format!("{} is ruled by", t.object));
        assert_eq!(inv.answer, t.subject);
    }

    #[test]
    fn unknown_template_index_is_an_error() {
        let w = small_world();
        let t = &w.facts_of("rules")[0];
        assert!(render_statement(t, Direction::Forward, 99, &w).is_err());
    }

    #[test]
    fn judgment_has_question_form_and_tokenizes_cleanly() {
        let w = small_world();
        let t = &w.facts_of("capital")[0];
        let q = render_judgment(&t.object, &t.relation, &t.subject, &w).unwrap();
        assert!(q.starts_with("Whether "));
        assert!(q.ends_with(" ?"));
        let vocab = vocab_for_world(&w);
        let ids = vocab.tokenize(&q);
        assert!(ids.iter().all(|&i| i != vocab.unk()), "judgment {q:?} has unknown words");
    }

    #[test]
    fn corpus_line_count_matches_closed_form() {
        let w = small_world();
        let lines = render_corpus(&w, 0).unwrap();
        let n_facts: usize = w.relations.iter().map(|r| w.facts_of(&r.id).len()).sum();
        assert_eq!(lines.len(), n_facts * (3 + 2 + 1 + 1));
    }

    #[test]
    fn corpus_tokenizes_without_unknowns() {
        let w = small_world();
        let vocab = vocab_for_world(&w);
        for line in render_corpus(&w, 0).unwrap() {
            let ids = vocab.tokenize(&line);
            assert!(ids.iter().all(|&i| i != vocab.unk()), "line {line:?}");
        }
    }

    #[test]
    fn judgment_no_foil_is_never_a_true_subject() {
        let w = small_world();
        let lines = render_corpus(&w, 5).unwrap();
        // (relation, object, subject) of every true fact
        let truths: HashSet<(String, String, String)> = w
            .all_facts()
            .map(|t| (t.relation.clone(), t.object.clone(), t.subject.clone()))
            .collect();
        let mut saw_no = 0;
        for line in &lines {
            let words: Vec<&str> = line.split_whitespace().collect();
            if words.first() != Some(&"Whether") || words.last() != Some(&"no") {
                continue;
            }
            // Whether <o> <phrase ...> <s> ? no
            let o = words[1];
            let s = words[words.len() - 3];
            let phrase = words[2..words.len() - 3].join(" ");
            let relation = w
                .relations
                .iter()
                .find(|r| r.inverse_phrase == phrase)
                .unwrap_or_else(|| panic!("no relation with phrase {phrase:?} in {line:?}"));
            assert!(
                !truths.contains(&(relation.id.clone(), o.to_string(), s.to_string())),
                "no-line contradicts fact: {line}"
            );
            saw_no += 1;
        }
        // one no-line per fact
        assert_eq!(saw_no, w.all_facts().count());
    }

    #[test]
    fn save_load_round_trips() {
        let w = small_world();
        let text = save_world(&w);
        let back = load_world(&text).unwrap();
        assert_eq!(w, back);
        assert_eq!(save_world(&back), text);
    }

    #[test]
    fn load_rejects_cardinality_violation_naming_the_triple() {
        let w = small_world();
        let mut text = save_world(&w);
        // duplicate a one-to-one subject with a different object
        let t = &w.facts_of("rules")[0];
        let other = w
            .entities
            .iter()
            .find(|e| **e != t.subject && **e != t.object)
            .unwrap();
        text.push_str(&format!("fact {} rules {}\n", t.subject, other));
        match load_world(&text) {
            Err(Error::InvariantViolation(msg)) => {
                assert!(msg.contains(&t.subject), "message {msg:?} should name the offender");
            }
            other => panic!("expected invariant violation, got {other:?}"),
        }
    }

    #[test]
    fn empty_fact_set_for_declared_relation_is_accepted() {
        let text = "entity a\nentity b\nrelation watches one-to-one | {} watches ;; {} observes ;; {} sees | {} is watched by ;; {} is seen by | watches ;; is watched by\n";
        let w = load_world(text).unwrap();
        assert!(w.facts_of("watches").is_empty());
    }

    #[test]
    fn infeasible_one_to_one_demand_is_rejected() {
        match gen_world(1, 10, 1, 20) {
            Err(Error::Construction(_)) => {}
            other => panic!("expected construction error, got {other:?}"),
        }
    }
}
