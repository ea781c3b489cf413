//! Query spec grammar: `modality:label[@weight]` terms joined by `+`.
//! Terms are combined as a weighted mean of class anchors, equal weights
//! unless given.

use std::fmt;
use std::str::FromStr;

use qsep_core::embedding::{compose_queries, EmbeddingProvider, Modality, QueryEmbedding};
use qsep_core::synthdata::Dataset;

#[derive(Debug, Clone, PartialEq)]
pub struct QueryTerm {
    pub modality: Modality,
    pub label: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuerySpec {
    pub terms: Vec<QueryTerm>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpecError(String);

impl fmt::Display for SpecError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for SpecError {}

fn parse_term(text: &str) -> Result<QueryTerm, SpecError> {
    let text = text.trim();
    let (body, weight) = match text.split_once('@') {
        Some((b, w)) => {
            let w: f64 = w
                .trim()
                .parse()
                .map_err(|_| SpecError(format!("weight `{w}` in `{text}` is not a number")))?;
            if !(w >= 0.0) || !w.is_finite() {
                return Err(SpecError(format!(
                    "weight {w} in `{text}` must be finite and >= 0"
                )));
            }
            (b, w)
        }
        None => (text, 1.0),
    };
    let (m, label) = body
        .split_once(':')
        .ok_or_else(|| SpecError(format!("term `{text}` is not of the form modality:label")))?;
    let modality: Modality = m
        .trim()
        .parse()
        .map_err(|e: qsep_core::Error| SpecError(e.to_string()))?;
    if modality == Modality::Mixed {
        return Err(SpecError("modality must be audio, image or text".into()));
    }
    let label = label.trim();
    if label.is_empty() {
        return Err(SpecError(format!("term `{text}` has an empty label")));
    }
    Ok(QueryTerm {
        modality,
        label: label.to_string(),
        weight,
    })
}

impl FromStr for QuerySpec {
    type Err = SpecError;

    fn from_str(s: &str) -> Result<Self, SpecError> {
        if s.trim().is_empty() {
            return Err(SpecError("empty query spec".into()));
        }
        let terms = s
            .split('+')
            .map(parse_term)
            .collect::<Result<Vec<_>, _>>()?;
        Ok(QuerySpec { terms })
    }
}

impl QuerySpec {
    /// Weighted mean of the named anchors in the catalog's embedding space.
    pub fn embed(&self, dataset: &Dataset) -> qsep_core::Result<QueryEmbedding> {
        let parts = self
            .terms
            .iter()
            .map(|t| {
                let class = dataset.manifest().class_by_label(&t.label)?;
                Ok((
                    dataset.space().anchor(class.class_id, t.modality)?,
                    t.weight,
                ))
            })
            .collect::<qsep_core::Result<Vec<_>>>()?;
        compose_queries(&parts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_single_and_composed_terms() {
        let s: QuerySpec = "text:chirp".parse().unwrap();
        assert_eq!(s.terms.len(), 1);
        assert_eq!(s.terms[0].modality, Modality::Text);
        assert_eq!(s.terms[0].weight, 1.0);
        let s: QuerySpec = "text:chirp + image:chirp@2.5".parse().unwrap();
        assert_eq!(s.terms[1].modality, Modality::Image);
        assert_eq!(s.terms[1].label, "chirp");
        assert_eq!(s.terms[1].weight, 2.5);
    }

    #[test]
    fn rejects_malformed_specs() {
        for bad in [
            "",
            "chirp",
            "smell:chirp",
            "text:",
            "text:chirp@x",
            "text:chirp@-1",
            "mixed:chirp",
            "text:a++b",
        ] {
            assert!(bad.parse::<QuerySpec>().is_err(), "{bad}");
        }
    }
}
