//! Prompt rendering: the structured screening prompt and the two CoT
//! question-generation prompts.
//!
//! Section texts are data, not code. The defaults below are the prompt set
//! our screening runs use; domain experts can swap any of it out via a TOML
//! spec file without touching the renderer.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::compounds::CompoundGroup;
use crate::corpus::TextChunk;

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("cannot render a prompt for an empty group")]
    EmptyGroup,
    #[error("prompt spec is for {got} but {expected} is required")]
    ModeMismatch { expected: QaMode, got: QaMode },
    #[error("invalid prompt spec: {0}")]
    InvalidSpec(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed prompt spec {path}: {source}")]
    Toml {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
}

/// The screening prompt, section by section. Renders in the fixed order
/// goals, principles, considerations, output requirements, filtering rule,
/// candidate list, final output instructions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScreeningPromptSpec {
    pub core_goals: Vec<String>,
    pub design_principles: Vec<String>,
    pub critical_considerations: Vec<String>,
    pub output_requirements: Vec<String>,
    pub filtering_rule: String,
    pub final_output_instructions: Vec<String>,
    /// Selection budget per group; the tournament truncates parses to this.
    pub max_selections: usize,
    /// The "fewer than N" count the filtering rule talks about.
    pub min_selections_note: usize,
}

impl Default for ScreeningPromptSpec {
    fn default() -> Self {
        let s = |v: &str| v.to_string();
        ScreeningPromptSpec {
            core_goals: vec![
                s("Defect passivation."),
                s("Control crystallization kinetics and film morphology."),
                s("Optimize energy-level alignment."),
            ],
            design_principles: vec![
                s("Lewis acid-base interactions."),
                s("Crystallization modulators."),
                s("Multifunctional additive design."),
            ],
            critical_considerations: vec![
                s("Solubility in DMF/DMSO."),
                s("Compatibility with perovskite chemistry and subsequent layers."),
                s("Prefer commercially available or natural/food-grade compounds."),
            ],
            output_requirements: vec![
                s("Analyze functional groups and mechanistic role."),
                s("Evaluate processing compatibility."),
                s("Rank 3-5 top candidate additives by expected PV efficiency improvement."),
                s("For each: chemical name + CAS number; rationale/mechanism; primary function(s)."),
            ],
            filtering_rule: s(
                "**If fewer than 3 candidates truly meet ALL the core goals and critical \
                 considerations, do not force the output to contain 3-5 items. Instead, only \
                 list those compounds that genuinely satisfy the criteria.**",
            ),
            final_output_instructions: vec![
                s("**Output only the selected additives, each enclosed in a single set of braces {}.**"),
                s("**Within each brace, include only the chemical name and CAS number.**"),
                s("Do not output any extra text or explanation beyond these braces."),
                s("Ensure that your final selections are fully consistent with your internal reasoning."),
            ],
            max_selections: 3,
            min_selections_note: 3,
        }
    }
}

impl ScreeningPromptSpec {
    pub fn validate(&self) -> Result<(), PromptError> {
        for (name, section) in [
            ("core_goals", &self.core_goals),
            ("design_principles", &self.design_principles),
            ("critical_considerations", &self.critical_considerations),
        ] {
            if section.is_empty() {
                return Err(PromptError::InvalidSpec(format!("section {name} is empty")));
            }
        }
        if self.max_selections == 0 {
            return Err(PromptError::InvalidSpec("max_selections must be at least 1".into()));
        }
        if self.min_selections_note == 0 {
            return Err(PromptError::InvalidSpec("min_selections_note must be at least 1".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PromptError::Io { path: path.to_path_buf(), source: e })?;
        let spec: ScreeningPromptSpec = toml::from_str(&text)
            .map_err(|e| PromptError::Toml { path: path.to_path_buf(), source: e })?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Render one candidate as it appears in prompts and selections.
pub fn candidate_line(name: &str, cas: &str) -> String {
    format!("- {name} (CAS: {cas})")
}

/// Inverse of [`candidate_line`] over a block of text: every line of the
/// exact rendered shape, as (name, cas) pairs. Meant for test selectors
/// that pick candidates back out of a rendered prompt, not for parsing
/// free-form model replies (the screening engine owns that).
pub fn parse_candidate_lines(text: &str) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for line in text.lines() {
        let Some(rest) = line.strip_prefix("- ") else { continue };
        let Some(rest) = rest.strip_suffix(')') else { continue };
        let Some(split) = rest.rfind(" (CAS: ") else { continue };
        let name = &rest[..split];
        let cas = &rest[split + " (CAS: ".len()..];
        if !name.is_empty() && !cas.is_empty() {
            out.push((name.to_string(), cas.to_string()));
        }
    }
    out
}

/// Render the full screening prompt for one group.
pub fn render_screening_prompt(
    spec: &ScreeningPromptSpec,
    group: &CompoundGroup,
) -> Result<String, PromptError> {
    spec.validate()?;
    if group.members.is_empty() {
        return Err(PromptError::EmptyGroup);
    }

    let mut out = String::new();
    let numbered = |out: &mut String, heading: &str, items: &[String]| {
        let _ = writeln!(out, "{heading}:");
        for (i, item) in items.iter().enumerate() {
            let _ = writeln!(out, "{}. {item}", i + 1);
        }
        out.push('\n');
    };
    numbered(&mut out, "Core Design Goals", &spec.core_goals);
    numbered(&mut out, "Key Design Principles & Strategies", &spec.design_principles);
    numbered(&mut out, "Critical Design Considerations", &spec.critical_considerations);

    out.push_str("Output Requirements:\n");
    for item in &spec.output_requirements {
        let _ = writeln!(out, "- {item}");
    }
    out.push('\n');

    out.push_str("Additional Filtering Rule:\n");
    let _ = writeln!(out, "- {}", spec.filtering_rule);
    out.push('\n');

    out.push_str("Here is a list of candidate compounds from our chemical database:\n");
    for compound in &group.members {
        let _ = writeln!(out, "{}", candidate_line(&compound.name, &compound.cas));
    }
    out.push('\n');

    out.push_str("Please screen and rank these compounds according to the prompt above.\n");
    out.push_str("**Final Output Instructions:**\n");
    for item in &spec.final_output_instructions {
        let _ = writeln!(out, "- {item}");
    }
    Ok(out)
}

/// Which generator a QA prompt spec belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QaMode {
    PaperChunk,
    CompoundGroup,
}

impl std::fmt::Display for QaMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            QaMode::PaperChunk => "paper_chunk",
            QaMode::CompoundGroup => "compound_group",
        })
    }
}

/// Question-generation prompt spec. The CoT template must ask for explicit
/// reasoning and a separate final answer; the think-tag convention the rest
/// of the pipeline relies on comes from here.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaGenPromptSpec {
    pub mode: QaMode,
    pub cot_template: String,
}

/// Default reasoning instruction shared by both generator modes.
const DEFAULT_COT_TEMPLATE: &str = "Work through the problem step by step between <think> and \
</think> tags; that segment is your reasoning and may be as long as needed. After the closing \
tag, give only the final answer.";

impl QaGenPromptSpec {
    pub fn chunk_default() -> Self {
        QaGenPromptSpec { mode: QaMode::PaperChunk, cot_template: DEFAULT_COT_TEMPLATE.into() }
    }

    pub fn compound_default() -> Self {
        QaGenPromptSpec { mode: QaMode::CompoundGroup, cot_template: DEFAULT_COT_TEMPLATE.into() }
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        let lower = self.cot_template.to_lowercase();
        if !lower.contains("reason") {
            return Err(PromptError::InvalidSpec(
                "cot_template must mention the reasoning segment".into(),
            ));
        }
        if !lower.contains("final") {
            return Err(PromptError::InvalidSpec(
                "cot_template must mention the final answer segment".into(),
            ));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PromptError::Io { path: path.to_path_buf(), source: e })?;
        let spec: QaGenPromptSpec = toml::from_str(&text)
            .map_err(|e| PromptError::Toml { path: path.to_path_buf(), source: e })?;
        spec.validate()?;
        Ok(spec)
    }

    fn expect_mode(&self, expected: QaMode) -> Result<(), PromptError> {
        if self.mode != expected {
            return Err(PromptError::ModeMismatch { expected, got: self.mode });
        }
        Ok(())
    }
}

/// Prompt asking the generator model for one QA pair about a passage. The
/// passage is embedded verbatim and placed last, so prompt length is a fixed
/// overhead plus the chunk length.
pub fn render_chunk_qa_prompt(
    chunk: &TextChunk,
    spec: &QaGenPromptSpec,
) -> Result<String, PromptError> {
    spec.expect_mode(QaMode::PaperChunk)?;
    spec.validate()?;
    Ok(format!(
        "{}\n\nRead the passage below and pose one question a researcher working on perovskite \
         precursor additives would ask about it, then answer that question using only the \
         passage.\n\nPassage:\n{}",
        spec.cot_template, chunk.text
    ))
}

/// Prompt asking the generator model for a per-compound stepwise analysis
/// with a suitability verdict for each member.
pub fn render_compound_qa_prompt(
    group: &CompoundGroup,
    spec: &QaGenPromptSpec,
) -> Result<String, PromptError> {
    spec.expect_mode(QaMode::CompoundGroup)?;
    spec.validate()?;
    if group.members.is_empty() {
        return Err(PromptError::EmptyGroup);
    }
    let mut out = format!(
        "{}\n\nAnalyze each candidate compound below step by step: functional groups, likely \
         solubility in the precursor solvent, and interaction with the perovskite lattice. \
         Conclude for every compound whether it is a promising precursor additive.\n\n\
         Candidates:\n",
        spec.cot_template
    );
    for compound in &group.members {
        let _ = writeln!(out, "{}", candidate_line(&compound.name, &compound.cas));
    }
    Ok(out)
}
