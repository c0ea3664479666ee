//! Synthetic next-word tasks whose ground-truth distributions are known
//! exactly.

use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const BUNDLED_QUADRUPLES: &str = include_str!("../../data/analogy.txt");
pub const BUNDLED_CATEGORIES: &str = include_str!("../../data/categories.txt");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    Parallelogram,
    ListCompletion,
    Choice,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parallelogram" => Ok(Task::Parallelogram),
            "list" | "list_completion" => Ok(Task::ListCompletion),
            "choice" => Ok(Task::Choice),
            _ => Err(Error::Config(format!("unknown synthetic task `{s}`"))),
        }
    }
}

/// Which two corners of the analogy parallelogram `a : b :: c : d` are the
/// answer: the diagonal `(a, d)` or the edge `(a, b)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TargetMode {
    Diagonal,
    Edge,
}

impl fmt::Display for TargetMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TargetMode::Diagonal => "diagonal",
            TargetMode::Edge => "edge",
        })
    }
}

impl FromStr for TargetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diagonal" => Ok(TargetMode::Diagonal),
            "edge" => Ok(TargetMode::Edge),
            _ => Err(Error::Config(format!("unknown target mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub task: Task,
    pub n_groups: usize,
    pub items_per_prompt: usize,
    /// Templates with a `{x}`/`{y}` pair (parallelogram) or a `{list}` slot.
    pub templates: Vec<String>,
    pub seed: u64,
    pub target_mode: TargetMode,
}

impl SyntheticSpec {
    pub fn new(task: Task, n_groups: usize, seed: u64) -> Self {
        let (items, templates): (usize, &[&str]) = match task {
            Task::Parallelogram => (
                2,
                &[
                    "I met {x} and {y} before , and I like one of them more , which is",
                    "{x} and {y} were both mentioned , and the one I remember is",
                    "between {x} and {y} , my favorite is",
                ],
            ),
            Task::ListCompletion => (4, &["I like {list} , and", "we saw {list} , and then"]),
            Task::Choice => (5, &["there are {list} in front of me , and I pick up the", "from {list} , I choose the"]),
        };
        SyntheticSpec {
            task,
            n_groups,
            items_per_prompt: items,
            templates: templates.iter().map(|s| s.to_string()).collect(),
            seed,
            target_mode: TargetMode::Diagonal,
        }
    }
}

/// One prompt with its exact next-word distribution. Target weights share the
/// denominator `Σ weights`, so probabilities sum to one exactly.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub context: Vec<String>,
    pub target: Vec<(String, u32)>,
    /// Words the answer must avoid (listed items in list completion).
    pub forbidden: Vec<String>,
    /// Evaluation split: `diagonal`/`edge` for analogies, else the task name.
    pub split: String,
}

impl Record {
    pub fn denominator(&self) -> u32 {
        self.target.iter().map(|(_, w)| w).sum()
    }

    pub fn distribution(&self) -> Vec<(String, f64)> {
        let den = f64::from(self.denominator());
        self.target.iter().map(|(w, n)| (w.clone(), f64::from(*n) / den)).collect()
    }
}

pub type Quadruple = [String; 4];

/// Parses 4-word lines; `#` starts a comment.
pub fn parse_quadruples(text: &str) -> Result<Vec<Quadruple>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let words: Vec<&str> = line.split_whitespace().collect();
        if words.len() != 4 {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected 4 words, found {}", words.len()),
            });
        }
        out.push(words.into_iter().map(String::from).collect::<Vec<_>>().try_into().expect("length checked"));
    }
    if out.is_empty() {
        return Err(Error::Parse {
            line: 0,
            msg: "no quadruples".into(),
        });
    }
    Ok(out)
}

/// Parses `category: word word ...` lines.
pub fn parse_categories(text: &str) -> Result<Vec<(String, Vec<String>)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (name, words) = line.split_once(':').ok_or_else(|| Error::Parse {
            line: i + 1,
            msg: "expected `category: words`".into(),
        })?;
        let words: Vec<String> = words.split_whitespace().map(String::from).collect();
        if words.is_empty() {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("category `{}` has no words", name.trim()),
            });
        }
        out.push((name.trim().to_string(), words));
    }
    Ok(out)
}

fn fill(template: &str, slots: &[(&str, String)]) -> Vec<String> {
    let mut s = template.to_string();
    for (k, v) in slots {
        s = s.replace(k, v);
    }
    s.split_whitespace().map(String::from).collect()
}

pub fn gen_parallelogram(spec: &SyntheticSpec, quads: &[Quadruple]) -> Result<Vec<Record>> {
    if quads.is_empty() {
        return Err(Error::Config("no analogy quadruples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut order: Vec<usize> = (0..quads.len()).collect();
    order.shuffle(&mut rng);
    let mut out = Vec::new();
    for gi in 0..spec.n_groups {
        let q = &quads[order[gi % order.len()]];
        let (x, y) = match spec.target_mode {
            TargetMode::Diagonal => (&q[0], &q[3]),
            TargetMode::Edge => (&q[0], &q[1]),
        };
        for t in &spec.templates {
            let (first, second) = if rng.random_bool(0.5) { (x, y) } else { (y, x) };
            out.push(Record {
                context: fill(t, &[("{x}", first.clone()), ("{y}", second.clone())]),
                target: vec![(x.clone(), 1), (y.clone(), 1)],
                forbidden: Vec::new(),
                split: spec.target_mode.to_string(),
            });
        }
    }
    Ok(out)
}

fn pick_listed<'a>(
    spec: &SyntheticSpec,
    cats: &'a [(String, Vec<String>)],
    need_rest: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(&'a [String], Vec<String>)> {
    if cats.is_empty() {
        return Err(Error::Config("no categories".into()));
    }
    let (name, words) = &cats[rng.random_range(0..cats.len())];
    if words.len() < spec.items_per_prompt + need_rest {
        return Err(Error::Config(format!(
            "category `{name}` has {} words; needs at least {}",
            words.len(),
            spec.items_per_prompt + need_rest
        )));
    }
    let mut listed: Vec<String> = words.choose_multiple(rng, spec.items_per_prompt).cloned().collect();
    listed.shuffle(rng);
    Ok((words, listed))
}

/// Prompts listing category members; the answer is any unlisted member.
pub fn gen_list_completion(spec: &SyntheticSpec, cats: &[(String, Vec<String>)]) -> Result<Vec<Record>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::new();
    for _ in 0..spec.n_groups {
        for t in &spec.templates {
            let (words, listed) = pick_listed(spec, cats, 1, &mut rng)?;
            let target = words.iter().filter(|w| !listed.contains(w)).map(|w| (w.clone(), 1)).collect();
            out.push(Record {
                context: fill(t, &[("{list}", listed.join(" , "))]),
                target,
                forbidden: listed,
                split: "list".into(),
            });
        }
    }
    Ok(out)
}

/// Prompts listing objects; the answer is uniform over the listed ones.
pub fn gen_choice(spec: &SyntheticSpec, cats: &[(String, Vec<String>)]) -> Result<Vec<Record>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::new();
    for _ in 0..spec.n_groups {
        for t in &spec.templates {
            let (_, listed) = pick_listed(spec, cats, 0, &mut rng)?;
            out.push(Record {
                context: fill(t, &[("{list}", listed.join(" , "))]),
                target: listed.iter().map(|w| (w.clone(), 1)).collect(),
                forbidden: Vec::new(),
                split: "choice".into(),
            });
        }
    }
    Ok(out)
}

/// Runs the generator for `spec.task` on the bundled word lists.
pub fn generate_bundled(spec: &SyntheticSpec) -> Result<Vec<Record>> {
    match spec.task {
        Task::Parallelogram => gen_parallelogram(spec, &parse_quadruples(BUNDLED_QUADRUPLES)?),
        Task::ListCompletion => gen_list_completion(spec, &parse_categories(BUNDLED_CATEGORIES)?),
        Task::Choice => gen_choice(spec, &parse_categories(BUNDLED_CATEGORIES)?),
    }
}
