//! Pair classification and multiple-choice selection.
//!
//! Validation can be run two ways. [`concat_pair`] puts both statements in one
//! sequence for a [`PairClassifier`], so the model sees them together.
//! [`build_validation_choices`] wraps each statement on its own and a
//! [`ChoiceScorer`] scores them independently; the chosen statement is the
//! sensible one. Explanation selection uses the same machinery with three
//! candidates, each the nonsense statement followed by one reason.

use serde::{Deserialize, Serialize};

use crate::backends::{classify_pair, score_choice, ChoiceScorer, Markers, PairClassifier};
use crate::corpus::{
    ensure_terminal_period, prepare_statement, tokenize_reference, wrap_special, ExplanationItem, StatementPair,
    TokenSequence,
};
use crate::error::{Error, Result};
use crate::plausibility::TIE_TOLERANCE;

/// Candidate sequences for one multiple-choice item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceSet {
    pub item_id: String,
    candidates: Vec<TokenSequence>,
    pub gold_index: Option<usize>,
}

impl ChoiceSet {
    pub fn new(item_id: impl Into<String>, candidates: Vec<TokenSequence>, gold_index: Option<usize>) -> Result<Self> {
        if !(2..=3).contains(&candidates.len()) {
            return Err(Error::InvalidArgument(format!(
                "a choice set holds 2 or 3 candidates, got {}",
                candidates.len()
            )));
        }
        if candidates.iter().any(|c| !c.has_specials()) {
            return Err(Error::Sequence("choice candidates must be wrapped".into()));
        }
        if gold_index.is_some_and(|g| g >= candidates.len()) {
            return Err(Error::InvalidArgument(format!(
                "gold index {gold_index:?} out of range"
            )));
        }
        Ok(Self {
            item_id: item_id.into(),
            candidates,
            gold_index,
        })
    }

    pub fn candidates(&self) -> &[TokenSequence] {
        &self.candidates
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    /// Reorders candidates so that new position `i` holds old candidate
    /// `order[i]`. The gold index follows its candidate.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.len()];
        if order.len() != self.len()
            || order
                .iter()
                .any(|&i| i >= self.len() || std::mem::replace(&mut seen[i], true))
        {
            return Err(Error::InvalidArgument(format!("{order:?} is not a permutation")));
        }
        Ok(Self {
            item_id: self.item_id.clone(),
            candidates: order.iter().map(|&i| self.candidates[i].clone()).collect(),
            gold_index: self
                .gold_index
                .map(|g| order.iter().position(|&i| i == g).expect("permutation")),
        })
    }
}

/// Outcome of an argmax over candidate scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub index: usize,
    pub tie: bool,
    pub scores: Vec<f64>,
}

impl Selection {
    /// Lowest index among the maximal scores; scores within
    /// [`TIE_TOLERANCE`] of the maximum count as maximal.
    pub fn from_scores(scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::EmptyInput("scores"));
        }
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut best = scores
            .iter()
            .enumerate()
            .filter(|(_, s)| max - **s <= TIE_TOLERANCE)
            .map(|(i, _)| i);
        let index = best.next().expect("maximum is attained");
        let tie = best.next().is_some();
        Ok(Self { index, tie, scores })
    }
}

/// `[begin, sent0.., sep, sent1.., sep]`, each statement period-normalized and
/// tokenized.
pub fn concat_pair(pair: &StatementPair, markers: &Markers) -> Result<TokenSequence> {
    let a = tokenize_reference(&ensure_terminal_period(&pair.sent0)?)?;
    let b = tokenize_reference(&ensure_terminal_period(&pair.sent1)?)?;
    let mut tokens = Vec::with_capacity(a.len() + b.len() + 3);
    tokens.push(markers.begin.clone());
    tokens.extend(a);
    tokens.push(markers.separator.clone());
    tokens.extend(b);
    tokens.push(markers.separator.clone());
    // the closing separator doubles as the end marker
    let closing = Markers {
        end: markers.separator.clone(),
        ..markers.clone()
    };
    TokenSequence::with_specials(tokens, &closing)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub nonsense_index: usize,
    pub tie: bool,
    pub distribution: [f64; 2],
}

/// Validation by a classifier over the concatenated pair.
pub fn classify_validation<C: PairClassifier + ?Sized>(pair: &StatementPair, classifier: &C) -> Result<Classification> {
    let seq = concat_pair(pair, classifier.markers())?;
    let distribution = classify_pair(classifier, &seq)?;
    Ok(classification_from(distribution))
}

pub(crate) fn classification_from(distribution: [f64; 2]) -> Classification {
    let sel = Selection::from_scores(distribution.to_vec()).expect("two scores");
    Classification {
        nonsense_index: sel.index,
        tie: sel.tie,
        distribution,
    }
}

/// Two independently wrapped statements. The gold index names the sensible
/// statement, the complement of the pair's nonsense index.
pub fn build_validation_choices(pair: &StatementPair, markers: &Markers) -> Result<ChoiceSet> {
    let candidates = pair
        .statements()
        .iter()
        .map(|s| prepare_statement(s, markers))
        .collect::<Result<Vec<_>>>()?;
    ChoiceSet::new(pair.id.clone(), candidates, pair.nonsense_index.map(|k| 1 - k))
}

/// Scores every candidate and returns the argmax.
pub fn select_choice<S: ChoiceScorer + ?Sized>(choices: &ChoiceSet, scorer: &S) -> Result<Selection> {
    if choices.is_empty() {
        return Err(Error::EmptyInput("choice set"));
    }
    let scores = choices
        .candidates()
        .iter()
        .map(|c| score_choice(scorer, c))
        .collect::<Result<Vec<_>>>()?;
    Selection::from_scores(scores)
}

/// Validation by separate scoring; returns the nonsense index and the
/// underlying selection of the sensible statement.
pub fn select_validation<S: ChoiceScorer + ?Sized>(pair: &StatementPair, scorer: &S) -> Result<(usize, Selection)> {
    let choices = build_validation_choices(pair, scorer.markers())?;
    let sel = select_choice(&choices, scorer)?;
    Ok((1 - sel.index, sel))
}

/// How the nonsense statement and a candidate reason are joined.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExplanationFormat {
    /// Put a separator token between context and ending instead of joining
    /// the two texts with a space.
    pub separator: bool,
}

/// One candidate per option: the period-normalized nonsense statement
/// followed by the period-normalized option.
pub fn build_explanation_candidates(
    item: &ExplanationItem,
    markers: &Markers,
    format: ExplanationFormat,
) -> Result<ChoiceSet> {
    let context = ensure_terminal_period(&item.false_statement)?;
    let candidates = item
        .options
        .iter()
        .map(|option| {
            let ending = ensure_terminal_period(option)?;
            if format.separator {
                let mut tokens = tokenize_reference(&context)?;
                tokens.push(markers.separator.clone());
                tokens.extend(tokenize_reference(&ending)?);
                wrap_special(tokens, markers)
            } else {
                wrap_special(tokenize_reference(&format!("{context} {ending}"))?, markers)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    ChoiceSet::new(item.id.clone(), candidates, item.gold_index)
}

pub fn select_explanation<S: ChoiceScorer + ?Sized>(
    item: &ExplanationItem,
    scorer: &S,
    format: ExplanationFormat,
) -> Result<Selection> {
    select_choice(&build_explanation_candidates(item, scorer.markers(), format)?, scorer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{CountMaskedLm, PllChoiceScorer, UnknownCountClassifier};
    use crate::plausibility::{choose_plausible, Normalization};

    struct Fixed(Vec<f64>);

    impl ChoiceScorer for Fixed {
        fn markers(&self) -> &Markers {
            static M: std::sync::OnceLock<Markers> = std::sync::OnceLock::new();
            M.get_or_init(Markers::default)
        }
        fn score(&self, seq: &TokenSequence) -> Result<f64> {
            // candidate k is identified by the token "k<digit>"
            let tag = seq
                .interior()
                .iter()
                .find_map(|t| t.strip_prefix('k')?.parse::<usize>().ok());
            Ok(self.0[tag.expect("tagged candidate")])
        }
    }

    fn tagged(n: usize) -> ChoiceSet {
        let m = Markers::default();
        let c = (0..n)
            .map(|i| wrap_special(vec![format!("k{i}")], &m).unwrap())
            .collect();
        ChoiceSet::new("x", c, None).unwrap()
    }

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    #[test]
    fn concatenation_layout() {
        let m = Markers::default();
        let pair = StatementPair::new("1", "He drinks apple.", "He drinks apple juice.", None).unwrap();
        let seq = concat_pair(&pair, &m).unwrap();
        assert_eq!(
            seq.tokens(),
            toks("[CLS] he drinks apple . [SEP] he drinks apple juice . [SEP]").as_slice()
        );
        assert_eq!(seq.tokens().iter().filter(|t| *t == "[SEP]").count(), 2);

        let same = StatementPair::new("1", "a b", "a b", None).unwrap();
        let seq = concat_pair(&same, &m).unwrap();
        assert_eq!(&seq.tokens()[1..4], &seq.tokens()[5..8]);

        let broken = StatementPair {
            id: "1".into(),
            sent0: "a".into(),
            sent1: "".into(),
            nonsense_index: None,
        };
        assert!(concat_pair(&broken, &m).is_err());
    }

    #[test]
    fn concat_is_order_sensitive() {
        let m = Markers::default();
        let ab = StatementPair::new("1", "a", "b", None).unwrap();
        assert_ne!(concat_pair(&ab, &m).unwrap(), concat_pair(&ab.swapped(), &m).unwrap());
    }

    #[test]
    fn classifier_validation() {
        let c = UnknownCountClassifier::new(["he", "drinks", "juice", "."]);
        let pair = StatementPair::new("1", "he drinks juice", "he drinks qq", None).unwrap();
        let r = classify_validation(&pair, &c).unwrap();
        assert_eq!(r.nonsense_index, 1);
        assert!(!r.tie);

        let same = StatementPair::new("1", "he drinks qq", "he drinks qq", None).unwrap();
        let r = classify_validation(&same, &c).unwrap();
        assert_eq!((r.nonsense_index, r.tie, r.distribution), (0, true, [0.5, 0.5]));

        assert_eq!(classification_from([0.9, 0.1]).nonsense_index, 0);
    }

    #[test]
    fn validation_choices() {
        let m = Markers::default();
        let pair = StatementPair::new("1", "He drinks apple.", "He drinks milk.", Some(0)).unwrap();
        let cs = build_validation_choices(&pair, &m).unwrap();
        assert_eq!(cs.len(), 2);
        assert_eq!(
            cs.candidates()[0].tokens(),
            toks("[CLS] he drinks apple . [SEP]").as_slice()
        );
        assert_eq!(
            cs.candidates()[1].tokens(),
            toks("[CLS] he drinks milk . [SEP]").as_slice()
        );
        assert_eq!(cs.gold_index, Some(1));
        let unlabeled = StatementPair {
            nonsense_index: None,
            ..pair
        };
        assert_eq!(build_validation_choices(&unlabeled, &m).unwrap().gold_index, None);
    }

    #[test]
    fn argmax_and_ties() {
        let sel = select_choice(&tagged(2), &Fixed(vec![-3.0, -1.2])).unwrap();
        assert_eq!((sel.index, sel.tie), (1, false));
        let sel = select_choice(&tagged(2), &Fixed(vec![-2.0, -2.0])).unwrap();
        assert_eq!((sel.index, sel.tie), (0, true));
        let sel = select_choice(&tagged(3), &Fixed(vec![-5.0, -1.0, -4.0])).unwrap();
        assert_eq!(sel.index, 1);
    }

    #[test]
    fn choice_set_invariants() {
        let m = Markers::default();
        let one = vec![wrap_special(toks("a"), &m).unwrap()];
        assert!(ChoiceSet::new("x", one, None).is_err());
        let plain = vec![TokenSequence::plain(toks("a")), TokenSequence::plain(toks("b"))];
        assert!(ChoiceSet::new("x", plain, None).is_err());
        let two = vec![
            wrap_special(toks("a"), &m).unwrap(),
            wrap_special(toks("b"), &m).unwrap(),
        ];
        assert!(ChoiceSet::new("x", two.clone(), Some(2)).is_err());
        let cs = ChoiceSet::new("x", two, Some(0)).unwrap();
        let p = cs.permuted(&[1, 0]).unwrap();
        assert_eq!(p.gold_index, Some(1));
        assert_eq!(p.candidates()[0], cs.candidates()[1]);
        assert!(cs.permuted(&[0, 0]).is_err());
    }

    fn elephant_item() -> ExplanationItem {
        ExplanationItem::new(
            "1",
            "He drinks apple.",
            [
                "Apple juice are very tasty and milk too.",
                "Apple can not be drunk.",
                "Apple cannot eat a human.",
            ],
            Some(1),
        )
        .unwrap()
    }

    #[test]
    fn explanation_candidates() {
        let m = Markers::default();
        let cs = build_explanation_candidates(&elephant_item(), &m, ExplanationFormat::default()).unwrap();
        assert_eq!(cs.len(), 3);
        let expected = wrap_special(
            tokenize_reference("He drinks apple. Apple can not be drunk.").unwrap(),
            &m,
        )
        .unwrap();
        assert_eq!(cs.candidates()[1], expected);
        assert_eq!(cs.gold_index, Some(1));
        assert!(cs.candidates()[0].to_string().contains("tasty"));
        assert!(cs.candidates()[2].to_string().contains("human"));

        let sep = build_explanation_candidates(&elephant_item(), &m, ExplanationFormat { separator: true }).unwrap();
        assert_eq!(
            sep.candidates()[1].tokens(),
            toks("[CLS] he drinks apple . [SEP] apple can not be drunk . [SEP]").as_slice()
        );

        let mut broken = elephant_item();
        broken.options[2] = String::new();
        assert!(build_explanation_candidates(&broken, &m, ExplanationFormat::default()).is_err());
    }

    #[test]
    fn explanation_with_reference_scorer() {
        // the backend has read the gold reason verbatim, so its tokens are
        // the most probable ones
        let lm = CountMaskedLm::train(&["apple can not be drunk .", "he drinks apple ."], 1.0).unwrap();
        let scorer = PllChoiceScorer::new(&lm, Normalization::LengthRoot, true);
        let sel = select_explanation(&elephant_item(), &scorer, ExplanationFormat::default()).unwrap();
        assert_eq!(sel.index, 1);
        assert!(!sel.tie);
    }

    #[test]
    fn explanation_permutation() {
        let lm = CountMaskedLm::train(&["apple can not be drunk .", "he drinks apple ."], 1.0).unwrap();
        let scorer = PllChoiceScorer::new(&lm, Normalization::LengthRoot, true);
        let item = elephant_item();
        let rotated = ExplanationItem::new(
            "1",
            &item.false_statement,
            [&item.options[1], &item.options[2], &item.options[0]],
            Some(0),
        )
        .unwrap();
        let sel = select_explanation(&rotated, &scorer, ExplanationFormat::default()).unwrap();
        assert_eq!(sel.index, 0);
    }

    #[test]
    fn separate_scoring_matches_pll_choice() {
        let lm = CountMaskedLm::train(&["he drinks juice .", "she eats bread ."], 0.7).unwrap();
        let pairs = [
            ("he drinks juice", "he drinks zzz"),
            ("she eats stones", "she eats bread"),
            ("a b", "a b"),
            ("he he he", "juice"),
        ];
        for mode in Normalization::ALL {
            for content_only in [false, true] {
                let scorer = PllChoiceScorer::new(&lm, mode, content_only);
                for (a, b) in pairs {
                    let pair = StatementPair::new("1", a, b, None).unwrap();
                    let (nonsense, sel) = select_validation(&pair, &scorer).unwrap();
                    let direct = choose_plausible(&pair, &lm, mode, content_only).unwrap();
                    assert_eq!(sel.index, direct.index);
                    assert_eq!(sel.tie, direct.tie);
                    assert_eq!(nonsense, 1 - direct.index);
                }
            }
        }
    }
}
