//! Kinship stories: chains of family facts whose consequences follow from a
//! gendered composition table.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{example_rng, sample_in_order, Gender, Person, WorldgenError};
use crate::constraints::ConstraintExpr;
use crate::corpus::{Example, Proposition, QaPair, TruthLabel, BREAKPOINT, PERSON_KEY};
use crate::worldgen::microworld::GENDER_KEY;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Kin {
    Parent,
    Child,
    Sibling,
    Spouse,
    Grandparent,
    Grandchild,
    Uncle,
    Nephew,
}

impl Kin {
    pub const ALL: [Kin; 8] =
        [Kin::Parent, Kin::Child, Kin::Sibling, Kin::Spouse, Kin::Grandparent, Kin::Grandchild, Kin::Uncle, Kin::Nephew];

    fn inverse(self) -> Kin {
        match self {
            Kin::Parent => Kin::Child,
            Kin::Child => Kin::Parent,
            Kin::Sibling => Kin::Sibling,
            Kin::Spouse => Kin::Spouse,
            Kin::Grandparent => Kin::Grandchild,
            Kin::Grandchild => Kin::Grandparent,
            Kin::Uncle => Kin::Nephew,
            Kin::Nephew => Kin::Uncle,
        }
    }
}

/// A gendered relation; the gender is that of the relation's subject
/// ("A is the mother of B": A is female).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Relation {
    pub kin: Kin,
    pub gender: Gender,
}

const WORDS: [(Kin, &str, &str); 8] = [
    (Kin::Parent, "father", "mother"),
    (Kin::Child, "son", "daughter"),
    (Kin::Sibling, "brother", "sister"),
    (Kin::Spouse, "husband", "wife"),
    (Kin::Grandparent, "grandfather", "grandmother"),
    (Kin::Grandchild, "grandson", "granddaughter"),
    (Kin::Uncle, "uncle", "aunt"),
    (Kin::Nephew, "nephew", "niece"),
];

impl Relation {
    pub fn new(kin: Kin, gender: Gender) -> Self {
        Relation { kin, gender }
    }

    /// All 16 gendered relations.
    pub fn inventory() -> Vec<Relation> {
        Kin::ALL.iter().flat_map(|k| [Relation::new(*k, Gender::Male), Relation::new(*k, Gender::Female)]).collect()
    }

    pub fn word(self) -> &'static str {
        let (_, m, f) = WORDS.iter().find(|(k, _, _)| *k == self.kin).unwrap();
        match self.gender {
            Gender::Male => m,
            Gender::Female => f,
        }
    }

    pub fn parse(word: &str) -> Result<Relation, WorldgenError> {
        for (k, m, f) in WORDS {
            if word == m {
                return Ok(Relation::new(k, Gender::Male));
            }
            if word == f {
                return Ok(Relation::new(k, Gender::Female));
            }
        }
        Err(WorldgenError::UnknownRelation(word.to_string()))
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.word())
    }
}

/// Ungendered composition: B is `r1` of C and A is `r2` of B, so A is the
/// result of C.
fn compose_kin(r1: Kin, r2: Kin) -> Option<Kin> {
    use Kin::*;
    Some(match (r1, r2) {
        (Parent, Parent) => Grandparent,
        (Parent, Spouse) => Parent,
        (Parent, Sibling) => Uncle,
        (Parent, Child) => Sibling,
        (Child, Parent) => Spouse,
        (Child, Child) => Grandchild,
        (Child, Sibling) => Child,
        (Sibling, Sibling) => Sibling,
        (Sibling, Parent) => Parent,
        (Sibling, Child) => Nephew,
        (Spouse, Child) => Child,
        (Grandparent, Spouse) => Grandparent,
        (Grandchild, Sibling) => Grandchild,
        (Uncle, Spouse) => Uncle,
        (Nephew, Sibling) => Nephew,
        _ => return None,
    })
}

/// Composition and inverse tables over the full inventory.
pub fn default_composition_rules() -> BTreeMap<(Relation, Relation), Relation> {
    let mut rules = BTreeMap::new();
    for r1 in Relation::inventory() {
        for r2 in Relation::inventory() {
            if let Some(k) = compose_kin(r1.kin, r2.kin) {
                rules.insert((r1, r2), Relation::new(k, r2.gender));
            }
        }
    }
    rules
}

/// Keyed by the relation and the gender of its object, which becomes the
/// subject of the inverse.
pub fn default_inverse_rules() -> BTreeMap<(Relation, Gender), Relation> {
    let mut rules = BTreeMap::new();
    for r in Relation::inventory() {
        for g in [Gender::Male, Gender::Female] {
            rules.insert((r, g), Relation::new(r.kin.inverse(), g));
        }
    }
    rules
}

pub fn compose_relations(r1: &str, r2: &str) -> Result<Option<Relation>, WorldgenError> {
    let (a, b) = (Relation::parse(r1)?, Relation::parse(r2)?);
    Ok(compose_kin(a.kin, b.kin).map(|k| Relation::new(k, b.gender)))
}

/// Gendered inverse of `r`. The subject gender must agree with `r`.
pub fn invert_relation(r: &str, subject_gender: Gender, object_gender: Gender) -> Result<Relation, WorldgenError> {
    let rel = Relation::parse(r)?;
    if rel.gender != subject_gender {
        return Err(WorldgenError::InvalidConfig(format!("'{r}' needs a {} subject", rel.gender.code())));
    }
    Ok(Relation::new(rel.kin.inverse(), object_gender))
}

#[derive(Clone, Debug, PartialEq)]
pub struct KinshipConfig {
    /// Facts per story.
    pub k: usize,
    /// Disjoint name lists keyed by split.
    pub name_pools: BTreeMap<String, Vec<Person>>,
    /// Which pool stories draw names from.
    pub split: String,
    pub relation_inventory: Vec<Relation>,
    pub composition_rules: BTreeMap<(Relation, Relation), Relation>,
    pub inverse_rules: BTreeMap<(Relation, Gender), Relation>,
    /// Relations that cannot hold between the same ordered pair together.
    pub mutex_groups: Vec<Vec<Relation>>,
    pub seed: u64,
    pub max_retries: usize,
    pub unknown_per_breakpoint: usize,
    pub max_constraints: usize,
}

const TRAIN_MALE: [&str; 20] = [
    "Jerry", "Derrick", "John", "Michael", "Robert", "James", "William", "David", "Richard", "Thomas", "Charles",
    "Joseph", "Daniel", "Matthew", "Anthony", "Mark", "Donald", "Steven", "Paul", "Andrew",
];
const TRAIN_FEMALE: [&str; 20] = [
    "Lisa", "Qiana", "Mary", "Patricia", "Jennifer", "Linda", "Elizabeth", "Barbara", "Susan", "Jessica", "Sarah",
    "Karen", "Nancy", "Betty", "Margaret", "Sandra", "Ashley", "Dorothy", "Kimberly", "Emily",
];
const TEST_MALE: [&str; 20] = [
    "Joshua", "Kenneth", "Kevin", "Brian", "George", "Edward", "Ronald", "Timothy", "Jason", "Jeffrey", "Ryan",
    "Jacob", "Gary", "Nicholas", "Eric", "Jonathan", "Stephen", "Larry", "Justin", "Scott",
];
const TEST_FEMALE: [&str; 20] = [
    "Donna", "Michelle", "Carol", "Amanda", "Melissa", "Deborah", "Stephanie", "Rebecca", "Laura", "Sharon",
    "Cynthia", "Kathleen", "Amy", "Shirley", "Angela", "Helen", "Anna", "Brenda", "Pamela", "Nicole",
];

fn pool(male: &[&str], female: &[&str]) -> Vec<Person> {
    male.iter()
        .map(|n| Person::new(*n, Gender::Male))
        .chain(female.iter().map(|n| Person::new(*n, Gender::Female)))
        .collect()
}

impl Default for KinshipConfig {
    fn default() -> Self {
        let mut name_pools = BTreeMap::new();
        name_pools.insert("train".to_string(), pool(&TRAIN_MALE, &TRAIN_FEMALE));
        name_pools.insert("test".to_string(), pool(&TEST_MALE, &TEST_FEMALE));
        KinshipConfig {
            k: 3,
            name_pools,
            split: "train".into(),
            relation_inventory: Relation::inventory(),
            composition_rules: default_composition_rules(),
            inverse_rules: default_inverse_rules(),
            mutex_groups: vec![Relation::inventory()],
            seed: 0,
            max_retries: 200,
            unknown_per_breakpoint: 2,
            max_constraints: 15,
        }
    }
}

impl KinshipConfig {
    pub fn validate(&self) -> Result<(), WorldgenError> {
        let bad = |m: String| Err(WorldgenError::InvalidConfig(m));
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        let Some(names) = self.name_pools.get(&self.split) else {
            return bad(format!("no name pool for split '{}'", self.split));
        };
        for g in [Gender::Male, Gender::Female] {
            if names.iter().filter(|p| p.gender == g).count() < 8 {
                return bad(format!("pool '{}' needs at least 8 names per gender", self.split));
            }
        }
        let mut seen: BTreeMap<&str, &str> = BTreeMap::new();
        for (split, people) in &self.name_pools {
            for p in people {
                if let Some(other) = seen.insert(&p.name, split) {
                    if other != split {
                        return bad(format!("name {} appears in pools {other} and {split}", p.name));
                    }
                }
            }
        }
        for ((a, b), c) in &self.composition_rules {
            for r in [a, b, c] {
                if !self.relation_inventory.contains(r) {
                    return bad(format!("composition rule uses {r}, which is outside the inventory"));
                }
            }
        }
        for ((r, g), inv) in &self.inverse_rules {
            let back = self.inverse_rules.get(&(*inv, r.gender));
            if inv.gender != *g || back != Some(r) {
                return bad(format!("inverse rule for {r} is not an involution"));
            }
        }
        Ok(())
    }

    fn compose(&self, r1: Relation, r2: Relation) -> Option<Relation> {
        self.composition_rules.get(&(r1, r2)).copied()
    }

    fn invert(&self, r: Relation, object_gender: Gender) -> Option<Relation> {
        self.inverse_rules.get(&(r, object_gender)).copied()
    }

    fn mutex(&self, a: Relation, b: Relation) -> bool {
        a != b && self.mutex_groups.iter().any(|g| g.contains(&a) && g.contains(&b))
    }
}

/// "A is the r of B".
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Fact<'a> {
    pub subject: &'a str,
    pub relation: Relation,
    pub object: &'a str,
}

fn fact_text(subject: &str, relation: Relation, object: &str) -> String {
    format!("{subject} is the {relation} of {object}")
}

/// One derived fact with the premises it came from.
#[derive(Clone, Debug, PartialEq, Eq)]
struct Derivation {
    subject: String,
    relation: Relation,
    object: String,
    premises: Vec<(String, Relation, String)>,
}

type Closure = BTreeMap<(String, String), Derivation>;

/// Forward-chains stated facts through inverses and pairwise compositions
/// with a worklist. Errors if a pair would receive two relations.
fn worklist_closure(
    cfg: &KinshipConfig,
    genders: &BTreeMap<String, Gender>,
    stated: &[(String, Relation, String)],
) -> Result<Closure, WorldgenError> {
    let mut closure: Closure = BTreeMap::new();
    let mut queue: VecDeque<Derivation> = stated
        .iter()
        .map(|(a, r, b)| Derivation { subject: a.clone(), relation: *r, object: b.clone(), premises: vec![] })
        .collect();
    while let Some(d) = queue.pop_front() {
        if d.subject == d.object {
            continue;
        }
        let key = (d.subject.clone(), d.object.clone());
        if let Some(prev) = closure.get(&key) {
            if prev.relation != d.relation {
                return Err(WorldgenError::InvalidConfig(format!(
                    "{} is both the {} and the {} of {}",
                    d.subject, prev.relation, d.relation, d.object
                )));
            }
            continue;
        }
        let this = (d.subject.clone(), d.relation, d.object.clone());
        if let Some(inv) = genders.get(&d.object).and_then(|g| cfg.invert(d.relation, *g)) {
            queue.push_back(Derivation {
                subject: d.object.clone(),
                relation: inv,
                object: d.subject.clone(),
                premises: vec![this.clone()],
            });
        }
        for other in closure.values() {
            // other: B r1 C, this: A r2 B.
            if other.subject == d.object {
                if let Some(r) = cfg.compose(other.relation, d.relation) {
                    queue.push_back(Derivation {
                        subject: d.subject.clone(),
                        relation: r,
                        object: other.object.clone(),
                        premises: vec![(other.subject.clone(), other.relation, other.object.clone()), this.clone()],
                    });
                }
            }
            // this: B r1 C, other: A r2 B.
            if other.object == d.subject {
                if let Some(r) = cfg.compose(d.relation, other.relation) {
                    queue.push_back(Derivation {
                        subject: other.subject.clone(),
                        relation: r,
                        object: d.object.clone(),
                        premises: vec![this.clone(), (other.subject.clone(), other.relation, other.object.clone())],
                    });
                }
            }
        }
        closure.insert(key, d);
    }
    Ok(closure)
}

// ---------------------------------------------------------------------------
// Ground-truth families

struct Family {
    people: Vec<Person>,
    /// relation of i to j, when one exists.
    truth: BTreeMap<(usize, usize), Relation>,
}

fn sample_family(cfg: &KinshipConfig, rng: &mut ChaCha8Rng) -> Family {
    let names = &cfg.name_pools[&cfg.split];
    let mut males: Vec<&Person> = names.iter().filter(|p| p.gender == Gender::Male).collect();
    let mut females: Vec<&Person> = names.iter().filter(|p| p.gender == Gender::Female).collect();
    males.shuffle(rng);
    females.shuffle(rng);
    let mut people: Vec<Person> = Vec::new();
    let mut take = |g: Gender, people: &mut Vec<Person>| -> Option<usize> {
        let p = match g {
            Gender::Male => males.pop(),
            Gender::Female => females.pop(),
        }?;
        people.push(p.clone());
        Some(people.len() - 1)
    };
    let mut parents: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut spouse: BTreeMap<usize, usize> = BTreeMap::new();
    let random_gender = |rng: &mut ChaCha8Rng| if rng.random_bool(0.5) { Gender::Male } else { Gender::Female };

    let gf = take(Gender::Male, &mut people).unwrap();
    let gm = take(Gender::Female, &mut people).unwrap();
    spouse.insert(gf, gm);
    spouse.insert(gm, gf);
    let n_children = rng.random_range(2..=3);
    for _ in 0..n_children {
        let g = random_gender(rng);
        let Some(c) = take(g, &mut people) else { break };
        parents.insert(c, vec![gf, gm]);
        if rng.random_bool(0.8) {
            let Some(s) = take(if g == Gender::Male { Gender::Female } else { Gender::Male }, &mut people) else {
                continue;
            };
            spouse.insert(c, s);
            spouse.insert(s, c);
            for _ in 0..rng.random_range(1..=2) {
                let Some(gc) = take(random_gender(rng), &mut people) else { break };
                parents.insert(gc, vec![c, s]);
            }
        }
    }

    let n = people.len();
    let parents_of = |i: usize| parents.get(&i).cloned().unwrap_or_default();
    let is_parent = |a: usize, b: usize| parents_of(b).contains(&a);
    let siblings = |a: usize, b: usize| a != b && !parents_of(a).is_empty() && parents_of(a) == parents_of(b);
    let is_grandparent = |a: usize, b: usize| parents_of(b).iter().any(|p| is_parent(a, *p));
    let is_uncle = |a: usize, b: usize| {
        parents_of(b)
            .iter()
            .any(|p| siblings(a, *p) || spouse.get(&a).is_some_and(|s| siblings(*s, *p)))
    };
    let mut truth = BTreeMap::new();
    for a in 0..n {
        for b in 0..n {
            if a == b {
                continue;
            }
            let kin = if is_parent(a, b) {
                Kin::Parent
            } else if is_parent(b, a) {
                Kin::Child
            } else if siblings(a, b) {
                Kin::Sibling
            } else if spouse.get(&a) == Some(&b) {
                Kin::Spouse
            } else if is_grandparent(a, b) {
                Kin::Grandparent
            } else if is_grandparent(b, a) {
                Kin::Grandchild
            } else if is_uncle(a, b) {
                Kin::Uncle
            } else if is_uncle(b, a) {
                Kin::Nephew
            } else {
                continue;
            };
            truth.insert((a, b), Relation::new(kin, people[a].gender));
        }
    }
    Family { people, truth }
}

/// Random walk P0, P1, ... where "P_j is the r_j of P_{j-1}" and the
/// running composition back to P0 stays defined.
fn sample_chain(cfg: &KinshipConfig, fam: &Family, rng: &mut ChaCha8Rng) -> Option<Vec<(usize, Relation, usize)>> {
    let n = fam.people.len();
    let mut chain = vec![rng.random_range(0..n)];
    let mut facts = Vec::new();
    let mut running: Option<Relation> = None;
    for _ in 0..cfg.k {
        let prev = *chain.last().unwrap();
        let options: Vec<(usize, Relation, Relation)> = (0..n)
            .filter(|c| !chain.contains(c))
            .filter_map(|c| {
                let r = *fam.truth.get(&(c, prev))?;
                let run = match running {
                    None => r,
                    Some(run) => cfg.compose(run, r)?,
                };
                // The composed relation must be the true one.
                (fam.truth.get(&(c, chain[0])) == Some(&run)).then_some((c, r, run))
            })
            .collect();
        let (c, r, run) = *options.choose(rng)?;
        facts.push((c, r, prev));
        chain.push(c);
        running = Some(run);
    }
    Some(facts)
}

// ---------------------------------------------------------------------------
// Annotation

/// Builds a fully annotated example from explicit facts
/// `(subject, relation word, object)`, one sentence each.
pub fn kinship_example_from_facts(
    cfg: &KinshipConfig,
    id: impl Into<String>,
    people: &[Person],
    facts: &[(&str, &str, &str)],
    rng: &mut ChaCha8Rng,
) -> Result<Example, WorldgenError> {
    let genders: BTreeMap<String, Gender> = people.iter().map(|p| (p.name.clone(), p.gender)).collect();
    let stated = facts
        .iter()
        .map(|(a, r, b)| Ok((a.to_string(), Relation::parse(r)?, b.to_string())))
        .collect::<Result<Vec<_>, WorldgenError>>()?;
    let mut tokens = Vec::new();
    let mut props_per_bp = Vec::new();
    let mut contradicted: Vec<Proposition> = Vec::new();
    let mut contradicted_pairs: BTreeMap<String, String> = BTreeMap::new();
    let mut closures: Vec<Closure> = Vec::new();
    let mut mentioned: Vec<String> = Vec::new();
    for (j, (a, r, b)) in stated.iter().enumerate() {
        if rng.random_bool(0.5) {
            tokens.extend([a.as_str(), "is", "the", r.word(), "of", b.as_str(), "."].map(str::to_string));
        } else {
            tokens.extend([b.as_str(), "'s", r.word(), "is", a.as_str(), "."].map(str::to_string));
        }
        tokens.push(BREAKPOINT.into());
        for p in [b, a] {
            if !mentioned.contains(p) {
                mentioned.push(p.clone());
            }
        }
        let closure = worklist_closure(cfg, &genders, &stated[..=j])?;
        let mut props: Vec<Proposition> = closure
            .values()
            .map(|d| Proposition::new(fact_text(&d.subject, d.relation, &d.object), TruthLabel::Entailed))
            .collect();
        // One mutex distractor for every newly derived fact; distractors persist.
        let prev = closures.last();
        for (key, d) in &closure {
            if prev.is_some_and(|p| p.contains_key(key)) {
                continue;
            }
            let rivals: Vec<Relation> = cfg
                .relation_inventory
                .iter()
                .copied()
                .filter(|r| r.gender == d.relation.gender && cfg.mutex(*r, d.relation))
                .collect();
            if let Some(rival) = rivals.choose(rng) {
                let text = fact_text(&d.subject, *rival, &d.object);
                contradicted_pairs.insert(text.clone(), fact_text(&d.subject, d.relation, &d.object));
                contradicted.push(Proposition::new(text, TruthLabel::Contradicted));
            }
        }
        props.extend(contradicted.iter().cloned());
        let mut unknown = Vec::new();
        for s in &mentioned {
            for o in &mentioned {
                if s != o && !closure.contains_key(&(s.clone(), o.clone())) {
                    unknown.push((s.clone(), o.clone()));
                }
            }
        }
        for (s, o) in sample_in_order(&unknown, cfg.unknown_per_breakpoint, rng) {
            let g = genders[&s];
            let options: Vec<Relation> = cfg.relation_inventory.iter().copied().filter(|r| r.gender == g).collect();
            if let Some(r) = options.choose(rng) {
                props.push(Proposition::new(fact_text(&s, *r, &o), TruthLabel::Unknown));
            }
        }
        props_per_bp.push(props);
        closures.push(closure);
    }

    let constraints = kinship_constraints(cfg, &genders, &closures, &contradicted_pairs, &props_per_bp, rng);
    let mut ex = Example::from_parts(id, tokens, props_per_bp);
    ex.constraints = constraints;
    let (first, last) = (&stated[0].2, &stated.last().unwrap().0);
    if let Some(d) = closures.last().unwrap().get(&(last.clone(), first.clone())) {
        ex.qa.push(QaPair {
            question: format!("how is {last} related to {first} ?"),
            answer: d.relation.word().to_string(),
        });
    }
    ex.meta.insert(PERSON_KEY.into(), people.iter().map(|p| p.name.as_str()).collect::<Vec<_>>().join(" "));
    ex.meta.insert(GENDER_KEY.into(), people.iter().map(|p| p.gender.code()).collect::<Vec<_>>().join(" "));
    ex.meta.insert("task".into(), "kinship".into());
    Ok(ex)
}

fn kinship_constraints(
    cfg: &KinshipConfig,
    genders: &BTreeMap<String, Gender>,
    closures: &[Closure],
    contradicted_pairs: &BTreeMap<String, String>,
    props: &[Vec<Proposition>],
    rng: &mut ChaCha8Rng,
) -> Vec<String> {
    use TruthLabel::Entailed as E;
    let emitted = |j: usize, t: &str| props[j - 1].iter().any(|p| p.text == t);
    let mut out = Vec::new();
    for (idx, closure) in closures.iter().enumerate() {
        let j = idx + 1;
        for d in closure.values() {
            let t = fact_text(&d.subject, d.relation, &d.object);
            if j < closures.len() {
                out.push(ConstraintExpr::implies(ConstraintExpr::atom(E, j, &t), ConstraintExpr::atom(E, j + 1, &t)));
            }
            if let Some(inv) = cfg.invert(d.relation, genders[&d.object]) {
                let it = fact_text(&d.object, inv, &d.subject);
                if closure.contains_key(&(d.object.clone(), d.subject.clone())) {
                    out.push(ConstraintExpr::implies(ConstraintExpr::atom(E, j, &t), ConstraintExpr::atom(E, j, &it)));
                }
            }
            if d.premises.len() == 2 {
                let prem: Vec<ConstraintExpr> = d
                    .premises
                    .iter()
                    .map(|(a, r, b)| ConstraintExpr::atom(E, j, &fact_text(a, *r, b)))
                    .collect();
                out.push(ConstraintExpr::implies(ConstraintExpr::And(prem), ConstraintExpr::atom(E, j, &t)));
            }
        }
        for (c, e) in contradicted_pairs {
            if emitted(j, c) && emitted(j, e) {
                out.push(ConstraintExpr::not(ConstraintExpr::And(vec![
                    ConstraintExpr::atom(E, j, e),
                    ConstraintExpr::atom(E, j, c),
                ])));
            }
        }
    }
    sample_in_order(&out, cfg.max_constraints, rng).iter().map(ConstraintExpr::to_string).collect()
}

pub fn gen_kinship_example(cfg: &KinshipConfig, index: u64) -> Result<Example, WorldgenError> {
    cfg.validate()?;
    let mut rng = example_rng(cfg.seed, &format!("kinship-{}", cfg.split), index);
    for _ in 0..=cfg.max_retries {
        let fam = sample_family(cfg, &mut rng);
        let Some(chain) = sample_chain(cfg, &fam, &mut rng) else { continue };
        let facts: Vec<(&str, &str, &str)> = chain
            .iter()
            .map(|(a, r, b)| (fam.people[*a].name.as_str(), r.word(), fam.people[*b].name.as_str()))
            .collect();
        let mut used: Vec<Person> = Vec::new();
        for (a, _, b) in &chain {
            for i in [*b, *a] {
                if !used.contains(&fam.people[i]) {
                    used.push(fam.people[i].clone());
                }
            }
        }
        let mut ex =
            kinship_example_from_facts(cfg, format!("kinship-{}-{}-{index}", cfg.split, cfg.seed), &used, &facts, &mut rng)?;
        // Every entailed fact must hold in the sampled family.
        let index_of = |n: &str| fam.people.iter().position(|p| p.name == n).unwrap();
        for bp in &ex.breakpoints {
            for p in bp.propositions.iter().filter(|p| p.label == TruthLabel::Entailed) {
                let (a, r, b) = oracle::parse_fact(&p.text).expect("rendered fact");
                if fam.truth.get(&(index_of(a), index_of(b))) != Some(&r) {
                    return Err(WorldgenError::OracleMismatch {
                        id: ex.id.clone(),
                        detail: format!("'{}' is false in the sampled family", p.text),
                    });
                }
            }
        }
        ex.meta.insert("seed".into(), cfg.seed.to_string());
        ex.meta.insert("k".into(), cfg.k.to_string());
        ex.meta.insert("split".into(), cfg.split.clone());
        return Ok(ex);
    }
    Err(WorldgenError::RetriesExhausted(cfg.max_retries))
}

// ---------------------------------------------------------------------------
// Oracle

/// Re-derives kinship labels by naive fixpoint over the parsed story.
pub mod oracle {
    use super::*;

    pub fn parse_fact(text: &str) -> Option<(&str, Relation, &str)> {
        let w: Vec<&str> = text.split(' ').collect();
        match w.as_slice() {
            [a, "is", "the", r, "of", b] => Some((a, Relation::parse(r).ok()?, b)),
            _ => None,
        }
    }

    fn parse_sentence(toks: &[String]) -> Option<(String, Relation, String)> {
        let w: Vec<&str> = toks.iter().map(String::as_str).collect();
        match w.as_slice() {
            [a, "is", "the", r, "of", b] => Some((a.to_string(), Relation::parse(r).ok()?, b.to_string())),
            [b, "'s", r, "is", a] => Some((a.to_string(), Relation::parse(r).ok()?, b.to_string())),
            _ => None,
        }
    }

    /// All (subject, object) → relations reachable from `facts`.
    pub fn fixpoint(
        cfg: &KinshipConfig,
        genders: &BTreeMap<String, Gender>,
        facts: &[(String, Relation, String)],
    ) -> BTreeMap<(String, String), BTreeSet<Relation>> {
        let mut known: BTreeSet<(String, Relation, String)> = facts.iter().cloned().collect();
        loop {
            let mut new = BTreeSet::new();
            for (a, r, b) in &known {
                if let Some(inv) = genders.get(b).and_then(|g| cfg.inverse_rules.get(&(*r, *g))) {
                    new.insert((b.clone(), *inv, a.clone()));
                }
                for (a2, r2, b2) in &known {
                    // (a r b) as "B r1 C" and (a2 r2 b2) as "A r2 B".
                    if b2 == a {
                        if let Some(c) = cfg.composition_rules.get(&(*r, *r2)) {
                            new.insert((a2.clone(), *c, b.clone()));
                        }
                    }
                }
            }
            new.retain(|(a, _, b)| a != b);
            let before = known.len();
            known.extend(new);
            if known.len() == before {
                break;
            }
        }
        let mut out: BTreeMap<(String, String), BTreeSet<Relation>> = BTreeMap::new();
        for (a, r, b) in known {
            out.entry((a, b)).or_default().insert(r);
        }
        out
    }

    pub fn check_example(cfg: &KinshipConfig, ex: &Example) -> Result<(), WorldgenError> {
        let mismatch = |detail: String| WorldgenError::OracleMismatch { id: ex.id.clone(), detail };
        let names: Vec<&str> = ex.meta.get(PERSON_KEY).map(|s| s.split(' ').collect()).unwrap_or_default();
        let codes: Vec<&str> = ex.meta.get(GENDER_KEY).map(|s| s.split(' ').collect()).unwrap_or_default();
        let genders: BTreeMap<String, Gender> = names
            .iter()
            .zip(&codes)
            .filter_map(|(n, c)| Some((n.to_string(), Gender::from_code(c)?)))
            .collect();
        let mut facts = Vec::new();
        let mut history: BTreeMap<String, TruthLabel> = BTreeMap::new();
        for j in 1..=ex.breakpoints.len() {
            let f = parse_sentence(ex.event_tokens(j))
                .ok_or_else(|| mismatch(format!("sentence {j} does not parse")))?;
            facts.push(f);
            let closure = fixpoint(cfg, &genders, &facts);
            if let Some(((a, b), rs)) = closure.iter().find(|(_, rs)| rs.len() > 1) {
                return Err(mismatch(format!("{a} and {b} are related in {} ways", rs.len())));
            }
            let props = &ex.breakpoints[j - 1].propositions;
            for p in props {
                let (a, r, b) = parse_fact(&p.text).ok_or_else(|| mismatch(format!("bad proposition '{}'", p.text)))?;
                let derived = match closure.get(&(a.to_string(), b.to_string())) {
                    Some(rs) if rs.contains(&r) => TruthLabel::Entailed,
                    Some(rs) if rs.iter().any(|d| cfg.mutex(*d, r)) => TruthLabel::Contradicted,
                    _ => TruthLabel::Unknown,
                };
                if derived != p.label {
                    return Err(mismatch(format!("breakpoint {j}: '{}' labeled {} but derives {derived}", p.text, p.label)));
                }
                if let Some(prev) = history.get(&p.text) {
                    if *prev != TruthLabel::Unknown && *prev != p.label {
                        return Err(mismatch(format!("'{}' changed from {prev} to {}", p.text, p.label)));
                    }
                }
                history.insert(p.text.clone(), p.label);
            }
            // Completeness: every derivable fact is emitted.
            for ((a, b), rs) in &closure {
                for r in rs {
                    let t = fact_text(a, *r, b);
                    if !props.iter().any(|p| p.text == t) {
                        return Err(mismatch(format!("breakpoint {j}: derivable '{t}' is missing")));
                    }
                }
            }
        }
        let closure = fixpoint(cfg, &genders, &facts);
        for qa in &ex.qa {
            let w: Vec<&str> = qa.question.split(' ').collect();
            if let ["how", "is", a, "related", "to", b, "?"] = w.as_slice() {
                let rs = closure.get(&(a.to_string(), b.to_string()));
                if !rs.is_some_and(|rs| rs.iter().any(|r| r.word() == qa.answer)) {
                    return Err(mismatch(format!("'{}' answered {}", qa.question, qa.answer)));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::validate_example;

    fn rel(w: &str) -> Relation {
        Relation::parse(w).unwrap()
    }

    #[test]
    fn composition_examples() {
        assert_eq!(compose_relations("mother", "mother").unwrap(), Some(rel("grandmother")));
        assert_eq!(compose_relations("father", "wife").unwrap(), Some(rel("mother")));
        assert_eq!(compose_relations("brother", "nephew").unwrap(), None);
        assert!(matches!(compose_relations("cousin", "mother"), Err(WorldgenError::UnknownRelation(_))));
    }

    #[test]
    fn inverse_examples_and_involution() {
        assert_eq!(invert_relation("sister", Gender::Female, Gender::Female).unwrap(), rel("sister"));
        assert_eq!(invert_relation("mother", Gender::Female, Gender::Male).unwrap(), rel("son"));
        assert!(invert_relation("mother", Gender::Male, Gender::Male).is_err());
        for r in Relation::inventory() {
            for g in [Gender::Male, Gender::Female] {
                let inv = invert_relation(r.word(), r.gender, g).unwrap();
                assert_eq!(invert_relation(inv.word(), g, r.gender).unwrap(), r);
            }
        }
        KinshipConfig::default().validate().unwrap();
    }

    #[test]
    fn fig4_story() {
        let cfg = KinshipConfig::default();
        let people = vec![
            Person::new("Jerry", Gender::Male),
            Person::new("Lisa", Gender::Female),
            Person::new("Derrick", Gender::Male),
            Person::new("Qiana", Gender::Female),
        ];
        let facts =
            [("Lisa", "granddaughter", "Jerry"), ("Derrick", "father", "Lisa"), ("Qiana", "wife", "Derrick")];
        let mut rng = example_rng(0, "fig4", 0);
        let ex = kinship_example_from_facts(&cfg, "fig4", &people, &facts, &mut rng).unwrap();
        let at3 = &ex.breakpoints[2].propositions;
        assert!(at3.iter().any(|p| p.text == "Qiana is the mother of Lisa" && p.label == TruthLabel::Entailed));
        assert!(at3.iter().any(|p| p.text == "Lisa is the daughter of Qiana" && p.label == TruthLabel::Entailed));
        assert!(validate_example(&ex).is_empty(), "{:?}", validate_example(&ex));
        oracle::check_example(&cfg, &ex).unwrap();
    }

    #[test]
    fn single_fact_story_entails_the_inverse() {
        let cfg = KinshipConfig { k: 1, ..Default::default() };
        let people = vec![Person::new("Mary", Gender::Female), Person::new("John", Gender::Male)];
        let mut rng = example_rng(0, "k1", 0);
        let ex = kinship_example_from_facts(&cfg, "k1", &people, &[("Mary", "mother", "John")], &mut rng).unwrap();
        let bp = &ex.breakpoints[0].propositions;
        let label = |t: &str| bp.iter().find(|p| p.text == t).map(|p| p.label);
        assert_eq!(label("Mary is the mother of John"), Some(TruthLabel::Entailed));
        assert_eq!(label("John is the son of Mary"), Some(TruthLabel::Entailed));
    }

    #[test]
    fn generated_examples_pass_the_oracle() {
        for k in 2..=5 {
            let cfg = KinshipConfig { k, ..Default::default() };
            for i in 0..40 {
                let ex = gen_kinship_example(&cfg, i).unwrap();
                assert_eq!(ex.breakpoints.len(), k);
                assert!(validate_example(&ex).is_empty(), "{:?}", validate_example(&ex));
                oracle::check_example(&cfg, &ex).unwrap();
                assert_eq!(ex.qa.len(), 1);
            }
        }
    }

    #[test]
    fn oracle_flags_a_wrong_label() {
        let cfg = KinshipConfig::default();
        let mut ex = gen_kinship_example(&cfg, 1).unwrap();
        let p = ex.breakpoints[0].propositions.iter_mut().find(|p| p.label == TruthLabel::Entailed).unwrap();
        p.label = TruthLabel::Unknown;
        assert!(oracle::check_example(&cfg, &ex).is_err());
    }

    #[test]
    fn splits_use_disjoint_names() {
        let train = KinshipConfig::default();
        let test = KinshipConfig { split: "test".into(), ..Default::default() };
        let names = |cfg: &KinshipConfig| -> BTreeSet<String> {
            (0..20)
                .flat_map(|i| {
                    let ex = gen_kinship_example(cfg, i).unwrap();
                    ex.meta[PERSON_KEY].split(' ').map(str::to_string).collect::<Vec<_>>()
                })
                .collect()
        };
        assert!(names(&train).is_disjoint(&names(&test)));
        let mut clash = KinshipConfig::default();
        clash.name_pools.get_mut("test").unwrap().push(Person::new("Jerry", Gender::Male));
        assert!(clash.validate().is_err());
    }
}
