//! Prompt templates, verbalizers, gold linearization and the option grid.
//!
//! A rendered prompt looks like
//!
//! ```text
//! <task command>
//!
//! <phrase intro> <shot sentence>
//! <recovery message> <gold linearization>
//!
//! <phrase intro> <test sentence>
//! <recovery message>
//! ```
//!
//! Blocks are separated by a blank line and generation stops at the first
//! newline. For RE the recovery message carries `{subject}` and `{object}`
//! placeholders that are filled with the two entity surfaces.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Example, LabelSet, NerExample, ReExample, Task};

pub const MAX_NER_SHOTS: usize = 10;
pub const MAX_RE_SHOTS: usize = 5;
pub const MAX_GRID_SIZE: usize = 8;
pub const NULL_INPUT: &str = "N/A";
pub const BLOCK_SEPARATOR: &str = "\n\n";
pub const STOP_SEQUENCE: &str = "\n";
pub const DEFAULT_SEPARATOR: &str = "; ";
pub const SUBJECT_SLOT: &str = "{subject}";
pub const OBJECT_SLOT: &str = "{object}";

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("invalid prompt config {id}: {reason}")]
    InvalidConfig { id: String, reason: String },
    #[error("invalid verbalizer: {0}")]
    InvalidVerbalizer(String),
    #[error("label '{0}' has no verbalizer phrase")]
    UnmappedLabel(String),
    #[error("{supplied} shots supplied but config {id} allows {allowed}")]
    TooManyShots {
        id: String,
        supplied: usize,
        allowed: usize,
    },
    #[error("shot {0} is the test example itself")]
    Leakage(String),
    #[error("example task does not match config task {0}")]
    TaskMismatch(Task),
    #[error("RE prompts need a verbalizer")]
    MissingVerbalizer,
    #[error("{0} prompt combinations requested, at most 8 are allowed")]
    TooManyCombinations(usize),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("cannot read grid file: {0}")]
    Io(String),
}

/// One point in the prompt-option grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub id: String,
    pub task: Task,
    pub task_command: String,
    pub phrase_intro: String,
    pub recovery_message: String,
    /// Entity-list separator (NER).
    #[serde(default = "default_separator")]
    pub separator: String,
    /// Verbalizer key (RE).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verbalizer_id: Option<String>,
    pub shots: usize,
}

fn default_separator() -> String {
    DEFAULT_SEPARATOR.to_string()
}

impl PromptConfig {
    pub fn max_shots(task: Task) -> usize {
        match task {
            Task::Ner => MAX_NER_SHOTS,
            Task::Re => MAX_RE_SHOTS,
        }
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        let bad = |reason: &str| PromptError::InvalidConfig {
            id: self.id.clone(),
            reason: reason.to_string(),
        };
        if self.id.is_empty() {
            return Err(bad("empty id"));
        }
        if self.shots > Self::max_shots(self.task) {
            return Err(bad(&format!(
                "{} shots exceeds the {} limit of {}",
                self.shots,
                self.task,
                Self::max_shots(self.task)
            )));
        }
        for (part, value) in [
            ("task_command", &self.task_command),
            ("phrase_intro", &self.phrase_intro),
            ("recovery_message", &self.recovery_message),
        ] {
            if value.contains(BLOCK_SEPARATOR) {
                return Err(bad(&format!("{part} contains a blank line")));
            }
        }
        if self.recovery_message.trim().is_empty() {
            return Err(bad("recovery_message is empty"));
        }
        match self.task {
            Task::Ner => {
                if self.separator.is_empty() || self.separator.contains('\n') {
                    return Err(bad("separator must be non-empty and single-line"));
                }
            }
            Task::Re => {
                if self.verbalizer_id.is_none() {
                    return Err(bad("RE configs need a verbalizer_id"));
                }
                if !self.recovery_message.contains(SUBJECT_SLOT)
                    || !self.recovery_message.contains(OBJECT_SLOT)
                {
                    return Err(bad("RE recovery_message must contain {subject} and {object}"));
                }
            }
        }
        Ok(())
    }
}

/// Maps relation labels to natural-language phrases.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verbalizer {
    pub null_label: String,
    pub null_phrase: String,
    pub phrases: BTreeMap<String, String>,
}

impl Verbalizer {
    pub fn phrase(&self, label: &str) -> Result<&str, PromptError> {
        if label == self.null_label {
            return Ok(&self.null_phrase);
        }
        self.phrases
            .get(label)
            .map(String::as_str)
            .ok_or_else(|| PromptError::UnmappedLabel(label.to_string()))
    }

    /// Phrases aligned with the label ids of `labels`.
    pub fn phrases_for(&self, labels: &LabelSet) -> Result<Vec<&str>, PromptError> {
        labels.names().iter().map(|l| self.phrase(l)).collect()
    }

    /// Checks full coverage of `labels` and pairwise-distinct phrases.
    pub fn validate(&self, labels: &LabelSet) -> Result<(), PromptError> {
        if self.null_label != labels.null_name() {
            return Err(PromptError::InvalidVerbalizer(format!(
                "null label '{}' differs from dataset null label '{}'",
                self.null_label,
                labels.null_name()
            )));
        }
        let phrases = self.phrases_for(labels)?;
        let mut seen = HashSet::new();
        for p in phrases {
            if p.trim().is_empty() {
                return Err(PromptError::InvalidVerbalizer("empty phrase".into()));
            }
            if !seen.insert(p) {
                return Err(PromptError::InvalidVerbalizer(format!("phrase '{p}' is used twice")));
            }
        }
        Ok(())
    }
}

/// A config together with the verbalizer it references.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub config: PromptConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verbalizer: Option<Verbalizer>,
}

impl Template {
    pub fn ner(config: PromptConfig) -> Self {
        Self {
            config,
            verbalizer: None,
        }
    }

    pub fn re(config: PromptConfig, verbalizer: Verbalizer) -> Self {
        Self {
            config,
            verbalizer: Some(verbalizer),
        }
    }

    pub fn verbalizer(&self) -> Result<&Verbalizer, PromptError> {
        self.verbalizer.as_ref().ok_or(PromptError::MissingVerbalizer)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub text: String,
    pub stop_sequences: Vec<String>,
    pub test_input: String,
}

/// Gold entity surfaces joined by `separator`, ordered by first occurrence in
/// the sentence, each surface once.
pub fn linearize_ner(example: &NerExample, separator: &str) -> String {
    let mut positioned: Vec<(usize, usize, &str)> = example
        .gold_entities
        .iter()
        .enumerate()
        .map(|(i, s)| (example.text.find(s.as_str()).unwrap_or(usize::MAX), i, s.as_str()))
        .collect();
    positioned.sort();
    positioned
        .into_iter()
        .map(|(_, _, s)| s)
        .collect::<Vec<_>>()
        .join(separator)
}

pub fn linearize_re(example: &ReExample, verbalizer: &Verbalizer) -> Result<String, PromptError> {
    verbalizer.phrase(&example.gold_label).map(str::to_string)
}

fn gold_for(template: &Template, example: &Example) -> Result<String, PromptError> {
    match example {
        Example::Ner(e) => Ok(linearize_ner(e, &template.config.separator)),
        Example::Re(e) => linearize_re(e, template.verbalizer()?),
    }
}

fn sentence_block(config: &PromptConfig, sentence: &str, pair: Option<(&str, &str)>) -> String {
    let mut block = String::new();
    block.push_str(&config.phrase_intro);
    if !config.phrase_intro.is_empty() && !config.phrase_intro.ends_with(char::is_whitespace) {
        block.push(' ');
    }
    block.push_str(sentence);
    block.push('\n');
    match pair {
        Some((subject, object)) => block.push_str(
            &config
                .recovery_message
                .replace(SUBJECT_SLOT, subject)
                .replace(OBJECT_SLOT, object),
        ),
        None => block.push_str(&config.recovery_message),
    }
    block
}

fn example_block(config: &PromptConfig, example: &Example) -> String {
    match example {
        Example::Ner(e) => sentence_block(config, &e.text, None),
        Example::Re(e) => sentence_block(
            config,
            &e.text,
            Some((&e.subject.surface, &e.object.surface)),
        ),
    }
}

/// The final (unanswered) block for a test example.
pub fn render_test_block(config: &PromptConfig, test: &Example) -> String {
    example_block(config, test)
}

/// The test block of a null prompt: sentence and entity mentions replaced by "N/A".
pub fn render_null_block(config: &PromptConfig) -> String {
    match config.task {
        Task::Ner => sentence_block(config, NULL_INPUT, None),
        Task::Re => sentence_block(config, NULL_INPUT, Some((NULL_INPUT, NULL_INPUT))),
    }
}

/// Text after the last blank line of a prompt, i.e. its test block.
pub fn last_block(prompt_text: &str) -> &str {
    prompt_text
        .rsplit_once(BLOCK_SEPARATOR)
        .map_or(prompt_text, |(_, tail)| tail)
}

fn assemble(template: &Template, shots: &[&Example], final_block: String) -> Result<String, PromptError> {
    let config = &template.config;
    let mut blocks = Vec::with_capacity(shots.len() + 2);
    if !config.task_command.is_empty() {
        blocks.push(config.task_command.clone());
    }
    for shot in shots {
        if shot.task() != config.task {
            return Err(PromptError::TaskMismatch(config.task));
        }
        let mut block = example_block(config, shot);
        let gold = gold_for(template, shot)?;
        if !gold.is_empty() {
            block.push(' ');
            block.push_str(&gold);
        }
        blocks.push(block);
    }
    blocks.push(final_block);
    Ok(blocks.join(BLOCK_SEPARATOR))
}

fn check_shots(config: &PromptConfig, shots: &[&Example]) -> Result<(), PromptError> {
    if shots.len() > config.shots {
        return Err(PromptError::TooManyShots {
            id: config.id.clone(),
            supplied: shots.len(),
            allowed: config.shots,
        });
    }
    Ok(())
}

pub fn render_prompt(
    template: &Template,
    shots: &[&Example],
    test: &Example,
) -> Result<Prompt, PromptError> {
    let config = &template.config;
    check_shots(config, shots)?;
    if test.task() != config.task {
        return Err(PromptError::TaskMismatch(config.task));
    }
    if let Some(leak) = shots.iter().find(|s| s.id() == test.id()) {
        return Err(PromptError::Leakage(leak.id().to_string()));
    }
    let text = assemble(template, shots, render_test_block(config, test))?;
    Ok(Prompt {
        text,
        stop_sequences: vec![STOP_SEQUENCE.to_string()],
        test_input: test.text().to_string(),
    })
}

/// Same layout as [`render_prompt`] with the test input replaced by "N/A".
pub fn null_prompt(template: &Template, shots: &[&Example]) -> Result<Prompt, PromptError> {
    check_shots(&template.config, shots)?;
    let text = assemble(template, shots, render_null_block(&template.config))?;
    Ok(Prompt {
        text,
        stop_sequences: vec![STOP_SEQUENCE.to_string()],
        test_input: NULL_INPUT.to_string(),
    })
}

/// Up to eight prompt configs for one dataset, plus the verbalizers they use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptGrid {
    pub task: Task,
    pub configs: Vec<PromptConfig>,
    #[serde(default)]
    pub verbalizers: BTreeMap<String, Verbalizer>,
}

impl PromptGrid {
    pub fn new(
        task: Task,
        configs: Vec<PromptConfig>,
        verbalizers: BTreeMap<String, Verbalizer>,
    ) -> Result<Self, PromptError> {
        let grid = Self {
            task,
            configs,
            verbalizers,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        if self.configs.is_empty() {
            return Err(PromptError::InvalidGrid("grid has no configs".into()));
        }
        if self.configs.len() > MAX_GRID_SIZE {
            return Err(PromptError::TooManyCombinations(self.configs.len()));
        }
        let mut ids = HashSet::new();
        for c in &self.configs {
            c.validate()?;
            if c.task != self.task {
                return Err(PromptError::InvalidGrid(format!("config {} has the wrong task", c.id)));
            }
            if !ids.insert(c.id.as_str()) {
                return Err(PromptError::InvalidGrid(format!("duplicate config id {}", c.id)));
            }
            if let Some(v) = &c.verbalizer_id {
                if !self.verbalizers.contains_key(v) {
                    return Err(PromptError::InvalidGrid(format!(
                        "config {} references unknown verbalizer {v}",
                        c.id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Checks every verbalizer against a dataset label set.
    pub fn check_labels(&self, labels: &LabelSet) -> Result<(), PromptError> {
        self.verbalizers.values().try_for_each(|v| v.validate(labels))
    }

    pub fn config(&self, id: &str) -> Option<&PromptConfig> {
        self.configs.iter().find(|c| c.id == id)
    }

    pub fn template(&self, config: &PromptConfig) -> Template {
        Template {
            config: config.clone(),
            verbalizer: config
                .verbalizer_id
                .as_ref()
                .and_then(|v| self.verbalizers.get(v))
                .cloned(),
        }
    }

    pub fn templates(&self) -> Vec<Template> {
        self.configs.iter().map(|c| self.template(c)).collect()
    }
}

/// Per-part alternatives from which the grid is the cartesian product.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Alternatives {
    pub task_command: Vec<String>,
    pub phrase_intro: Vec<String>,
    pub recovery_message: Vec<String>,
    /// NER only; defaults to `["; "]`.
    #[serde(default)]
    pub separator: Vec<String>,
    /// RE only; verbalizer ids.
    #[serde(default)]
    pub verbalizer: Vec<String>,
}

/// Cartesian product of the alternatives and shot counts, ids `c1..cN`.
pub fn build_grid(
    task: Task,
    alternatives: &Alternatives,
    shot_options: &[usize],
    verbalizers: BTreeMap<String, Verbalizer>,
) -> Result<PromptGrid, PromptError> {
    let separators = match task {
        Task::Ner if alternatives.separator.is_empty() => vec![DEFAULT_SEPARATOR.to_string()],
        Task::Ner => alternatives.separator.clone(),
        Task::Re => vec![DEFAULT_SEPARATOR.to_string()],
    };
    let verbalizer_ids: Vec<Option<String>> = match task {
        Task::Ner => vec![None],
        Task::Re => alternatives.verbalizer.iter().cloned().map(Some).collect(),
    };
    let total = alternatives.task_command.len()
        * alternatives.phrase_intro.len()
        * alternatives.recovery_message.len()
        * separators.len()
        * verbalizer_ids.len()
        * shot_options.len();
    if total == 0 {
        return Err(PromptError::InvalidGrid("every part needs at least one alternative".into()));
    }
    if total > MAX_GRID_SIZE {
        return Err(PromptError::TooManyCombinations(total));
    }
    let mut configs = Vec::with_capacity(total);
    for command in &alternatives.task_command {
        for intro in &alternatives.phrase_intro {
            for recovery in &alternatives.recovery_message {
                for separator in &separators {
                    for verbalizer_id in &verbalizer_ids {
                        for &shots in shot_options {
                            configs.push(PromptConfig {
                                id: format!("c{}", configs.len() + 1),
                                task,
                                task_command: command.clone(),
                                phrase_intro: intro.clone(),
                                recovery_message: recovery.clone(),
                                separator: separator.clone(),
                                verbalizer_id: verbalizer_id.clone(),
                                shots,
                            });
                        }
                    }
                }
            }
        }
    }
    PromptGrid::new(task, configs, verbalizers)
}

/// An explicit combination in a grid file, indexing into the alternatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigChoice {
    pub id: String,
    #[serde(default)]
    pub task_command: usize,
    #[serde(default)]
    pub phrase_intro: usize,
    #[serde(default)]
    pub recovery_message: usize,
    #[serde(default)]
    pub separator: usize,
    #[serde(default)]
    pub verbalizer: Option<String>,
    pub shots: usize,
}

/// On-disk grid document (TOML).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFile {
    pub task: Task,
    #[serde(default)]
    pub dataset: Option<String>,
    #[serde(default)]
    pub shots: Vec<usize>,
    pub alternatives: Alternatives,
    #[serde(default)]
    pub verbalizers: BTreeMap<String, Verbalizer>,
    /// When present, replaces the cartesian product.
    #[serde(default)]
    pub configs: Vec<ConfigChoice>,
}

impl GridFile {
    pub fn into_grid(self) -> Result<PromptGrid, PromptError> {
        if self.configs.is_empty() {
            return build_grid(self.task, &self.alternatives, &self.shots, self.verbalizers);
        }
        let pick = |list: &[String], idx: usize, part: &str| -> Result<String, PromptError> {
            list.get(idx)
                .cloned()
                .ok_or_else(|| PromptError::InvalidGrid(format!("{part} index {idx} out of range")))
        };
        let alts = &self.alternatives;
        let mut configs = Vec::with_capacity(self.configs.len());
        for choice in &self.configs {
            configs.push(PromptConfig {
                id: choice.id.clone(),
                task: self.task,
                task_command: pick(&alts.task_command, choice.task_command, "task_command")?,
                phrase_intro: pick(&alts.phrase_intro, choice.phrase_intro, "phrase_intro")?,
                recovery_message: pick(&alts.recovery_message, choice.recovery_message, "recovery_message")?,
                separator: if alts.separator.is_empty() {
                    DEFAULT_SEPARATOR.to_string()
                } else {
                    pick(&alts.separator, choice.separator, "separator")?
                },
                verbalizer_id: match self.task {
                    Task::Ner => None,
                    Task::Re => Some(
                        choice
                            .verbalizer
                            .clone()
                            .or_else(|| alts.verbalizer.first().cloned())
                            .ok_or_else(|| PromptError::InvalidGrid("no verbalizer given".into()))?,
                    ),
                },
                shots: choice.shots,
            });
        }
        PromptGrid::new(self.task, configs, self.verbalizers)
    }
}

pub fn parse_grid(toml_text: &str) -> Result<PromptGrid, PromptError> {
    let file: GridFile =
        toml::from_str(toml_text).map_err(|e| PromptError::InvalidGrid(e.to_string()))?;
    file.into_grid()
}

pub fn load_grid(path: &Path) -> Result<PromptGrid, PromptError> {
    let raw = fs::read_to_string(path).map_err(|e| PromptError::Io(format!("{}: {e}", path.display())))?;
    parse_grid(&raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Mention;

    fn ner_config(shots: usize) -> PromptConfig {
        PromptConfig {
            id: "n1".into(),
            task: Task::Ner,
            task_command: "List the diseases mentioned in each sentence.".into(),
            phrase_intro: "Sentence:".into(),
            recovery_message: "Diseases:".into(),
            separator: "; ".into(),
            verbalizer_id: None,
            shots,
        }
    }

    fn ner(id: &str, text: &str, ents: &[&str]) -> Example {
        Example::Ner(NerExample::new(id, text, ents, "disease").unwrap())
    }

    fn verbalizer() -> Verbalizer {
        Verbalizer {
            null_label: "false".into(),
            null_phrase: "none".into(),
            phrases: [("effect".to_string(), "effect".to_string())].into(),
        }
    }

    fn re_template() -> Template {
        Template::re(
            PromptConfig {
                id: "r1".into(),
                task: Task::Re,
                task_command: "Classify drug interactions.".into(),
                phrase_intro: "Sentence:".into(),
                recovery_message: "The relation between {subject} and {object} is:".into(),
                separator: "; ".into(),
                verbalizer_id: Some("v".into()),
                shots: 5,
            },
            verbalizer(),
        )
    }

    fn re_ex(id: &str, text: &str, s: &str, o: &str, label: &str) -> Example {
        Example::Re(
            ReExample::new(
                id,
                text,
                Mention::locate(text, s).unwrap(),
                Mention::locate(text, o).unwrap(),
                label,
            )
            .unwrap(),
        )
    }

    #[test]
    fn ner_linearization() {
        let e = NerExample::new("1", "naloxone reverses hypertension", &["hypertension", "naloxone"], "d").unwrap();
        assert_eq!(linearize_ner(&e, "; "), "naloxone; hypertension");
        let twice = NerExample::new("2", "fever then fever again", &["fever", "fever"], "d").unwrap();
        assert_eq!(linearize_ner(&twice, "; "), "fever");
        let none = NerExample::new("3", "nothing here", &[] as &[&str], "d").unwrap();
        assert_eq!(linearize_ner(&none, "; "), "");
    }

    #[test]
    fn re_linearization() {
        let v = verbalizer();
        let Example::Re(e) = re_ex("1", "aspirin and warfarin", "aspirin", "warfarin", "effect") else {
            unreachable!()
        };
        assert_eq!(linearize_re(&e, &v).unwrap(), "effect");
        let mut null = e.clone();
        null.gold_label = "false".into();
        assert_eq!(linearize_re(&null, &v).unwrap(), "none");
        let mut other = e;
        other.gold_label = "mechanism".into();
        assert_eq!(
            linearize_re(&other, &v),
            Err(PromptError::UnmappedLabel("mechanism".into()))
        );
    }

    #[test]
    fn zero_shot_layout() {
        let t = Template::ner(ner_config(0));
        let p = render_prompt(&t, &[], &ner("t", "fever and cough", &["fever"])).unwrap();
        assert_eq!(
            p.text,
            "List the diseases mentioned in each sentence.\n\nSentence: fever and cough\nDiseases:"
        );
        assert_eq!(p.stop_sequences, vec!["\n"]);
    }

    #[test]
    fn too_many_shots_rejected() {
        let t = Template::ner(ner_config(10));
        let shots: Vec<Example> = (0..12).map(|i| ner(&format!("s{i}"), &format!("s {i}"), &[])).collect();
        let refs: Vec<&Example> = shots.iter().collect();
        let err = render_prompt(&t, &refs, &ner("t", "x", &[])).unwrap_err();
        assert!(matches!(err, PromptError::TooManyShots { supplied: 12, allowed: 10, .. }));
    }

    #[test]
    fn shots_rendered_in_order_before_test() {
        let t = Template::ner(ner_config(2));
        let a = ner("a", "fever is common", &["fever"]);
        let b = ner("b", "asthma and gout", &["asthma", "gout"]);
        let test = ner("t", "cough only", &["cough"]);
        let p = render_prompt(&t, &[&a, &b], &test).unwrap();
        let ia = p.text.find("Diseases: fever").unwrap();
        let ib = p.text.find("Diseases: asthma; gout").unwrap();
        let it = p.text.find("cough only").unwrap();
        assert!(ia < ib && ib < it);
        assert!(p.text.ends_with("Sentence: cough only\nDiseases:"));
        assert!(!p.text.contains("Diseases: cough"));
    }

    #[test]
    fn leakage_is_rejected() {
        let t = Template::ner(ner_config(2));
        let a = ner("a", "fever", &["fever"]);
        assert_eq!(
            render_prompt(&t, &[&a], &a),
            Err(PromptError::Leakage("a".into()))
        );
    }

    #[test]
    fn re_blocks_name_both_entities() {
        let t = re_template();
        let shot = re_ex("s", "aspirin raises warfarin levels", "aspirin", "warfarin", "effect");
        let test = re_ex("t", "ibuprofen and heparin given", "ibuprofen", "heparin", "false");
        let p = render_prompt(&t, &[&shot], &test).unwrap();
        assert!(p.text.contains("The relation between aspirin and warfarin is: effect"));
        assert!(p.text.ends_with("The relation between ibuprofen and heparin is:"));
    }

    #[test]
    fn null_prompt_replaces_test_input() {
        let t = re_template();
        let shot = re_ex("s", "aspirin raises warfarin levels", "aspirin", "warfarin", "effect");
        let test = re_ex("t", "ibuprofen and heparin given", "ibuprofen", "heparin", "false");
        let real = render_prompt(&t, &[&shot], &test).unwrap();
        let null = null_prompt(&t, &[&shot]).unwrap();
        let block = last_block(&null.text);
        assert_eq!(block, "Sentence: N/A\nThe relation between N/A and N/A is:");
        assert!(!null.text.contains("ibuprofen"));
        assert_eq!(null, null_prompt(&t, &[&shot]).unwrap());
        let (real_head, _) = real.text.rsplit_once(BLOCK_SEPARATOR).unwrap();
        let (null_head, _) = null.text.rsplit_once(BLOCK_SEPARATOR).unwrap();
        assert_eq!(real_head, null_head);
    }

    #[test]
    fn zero_shot_null_prompt() {
        let t = Template::ner(ner_config(0));
        let p = null_prompt(&t, &[]).unwrap();
        assert_eq!(
            p.text,
            "List the diseases mentioned in each sentence.\n\nSentence: N/A\nDiseases:"
        );
    }

    fn alternatives(n_cmd: usize, n_intro: usize) -> Alternatives {
        Alternatives {
            task_command: (0..n_cmd).map(|i| format!("command {i}")).collect(),
            phrase_intro: (0..n_intro).map(|i| format!("intro {i}:")).collect(),
            recovery_message: vec!["Entities:".into()],
            separator: vec![],
            verbalizer: vec![],
        }
    }

    #[test]
    fn grid_counts() {
        let grid = build_grid(Task::Ner, &alternatives(2, 2), &[5, 10], BTreeMap::new()).unwrap();
        assert_eq!(grid.configs.len(), 8);
        let ids: HashSet<_> = grid.configs.iter().map(|c| c.id.clone()).collect();
        assert_eq!(ids.len(), 8);
        assert_eq!(
            build_grid(Task::Ner, &alternatives(3, 3), &[1], BTreeMap::new()),
            Err(PromptError::TooManyCombinations(9))
        );
        let single = build_grid(Task::Ner, &alternatives(1, 1), &[3], BTreeMap::new()).unwrap();
        assert_eq!(single.configs.len(), 1);
    }

    #[test]
    fn grid_rejects_shot_counts_above_cap() {
        assert!(build_grid(Task::Ner, &alternatives(1, 1), &[11], BTreeMap::new()).is_err());
    }

    #[test]
    fn verbalizer_validation() {
        let labels = LabelSet::new(vec!["effect".into(), "false".into()], "false").unwrap();
        assert!(verbalizer().validate(&labels).is_ok());
        let mut dup = verbalizer();
        dup.null_phrase = "effect".into();
        assert!(dup.validate(&labels).is_err());
        let wider = LabelSet::new(vec!["effect".into(), "int".into(), "false".into()], "false").unwrap();
        assert_eq!(
            verbalizer().validate(&wider),
            Err(PromptError::UnmappedLabel("int".into()))
        );
    }

    #[test]
    fn grid_file_parses_explicit_configs() {
        let grid = parse_grid(
            r#"
task = "re"
[alternatives]
task_command = ["Classify."]
phrase_intro = ["Sentence:"]
recovery_message = ["Relation of {subject} to {object}:"]
verbalizer = ["plain"]
[verbalizers.plain]
null_label = "false"
null_phrase = "none"
phrases = { effect = "effect" }
[[configs]]
id = "best"
shots = 5
"#,
        )
        .unwrap();
        assert_eq!(grid.configs.len(), 1);
        assert_eq!(grid.configs[0].verbalizer_id.as_deref(), Some("plain"));
        assert!(grid.template(&grid.configs[0]).verbalizer.is_some());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn distinct_examples(n: usize, seed: u32) -> Vec<Example> {
            (0..n)
                .map(|i| {
                    let w = format!("w{seed}x{i}");
                    ner(&format!("id{i}"), &format!("token {w} here"), &[w.as_str()])
                })
                .collect()
        }

        proptest! {
            #[test]
            fn rendering_is_injective_in_shot_order(n in 2usize..6, seed in 0u32..1000, swap in 0usize..5) {
                let ex = distinct_examples(n + 1, seed);
                let (test, shots) = ex.split_last().unwrap();
                let t = Template::ner(ner_config(10));
                let refs: Vec<&Example> = shots.iter().collect();
                let mut swapped = refs.clone();
                let i = swap % (n - 1);
                swapped.swap(i, i + 1);
                let a = render_prompt(&t, &refs, test).unwrap();
                let b = render_prompt(&t, &swapped, test).unwrap();
                prop_assert_ne!(a.text.clone(), b.text);
                prop_assert_eq!(a.text.matches(test.text()).count(), 1);
                prop_assert_eq!(a, render_prompt(&t, &refs, test).unwrap());
            }
        }
    }
}
