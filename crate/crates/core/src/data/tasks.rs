use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{CLS, FIRST_CONTENT, SEP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Whether designated token `a` occurs more often than `b`.
    MajorityToken,
    /// Whether the bigram `p q` occurs.
    ContainsPattern,
    /// Two segments; whether both carry the same topic token.
    PairEquality,
    /// Parity of the number of marked tokens.
    ParityOfMarkedTokens,
    /// Two segments; whether the first token of one equals the last of the other.
    FirstLastMatch,
    /// Occurrences of one token bucketed into {0,1}, {2,3}, {4,5}.
    CountThreshold,
}

impl TaskKind {
    pub const ALL: [TaskKind; 6] = [
        TaskKind::MajorityToken,
        TaskKind::ContainsPattern,
        TaskKind::PairEquality,
        TaskKind::ParityOfMarkedTokens,
        TaskKind::FirstLastMatch,
        TaskKind::CountThreshold,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::MajorityToken => "majority_token",
            TaskKind::ContainsPattern => "contains_pattern",
            TaskKind::PairEquality => "pair_equality",
            TaskKind::ParityOfMarkedTokens => "parity_of_marked_tokens",
            TaskKind::FirstLastMatch => "first_last_match",
            TaskKind::CountThreshold => "count_threshold",
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            TaskKind::CountThreshold => 3,
            _ => 2,
        }
    }

    fn designated_count(self) -> usize {
        match self {
            TaskKind::MajorityToken | TaskKind::ContainsPattern => 2,
            TaskKind::PairEquality => 4,
            TaskKind::ParityOfMarkedTokens => 3,
            TaskKind::FirstLastMatch => 5,
            TaskKind::CountThreshold => 1,
        }
    }

    pub(crate) fn min_content_tokens(self) -> usize {
        self.designated_count() + 4
    }

    pub(crate) fn min_seq_len(self) -> usize {
        10
    }

    pub fn is_pair(self) -> bool {
        matches!(self, TaskKind::PairEquality | TaskKind::FirstLastMatch)
    }
}

/// A concrete rule: task kind plus the client's designated tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRule {
    pub kind: TaskKind,
    pub designated: Vec<usize>,
    pub fillers: Vec<usize>,
    pub seq_len: usize,
}

fn count_in(tokens: &[usize], set: &[usize]) -> usize {
    tokens.iter().filter(|t| set.contains(t)).count()
}

fn segments(tokens: &[usize]) -> Option<(&[usize], &[usize])> {
    let body = tokens.strip_prefix(&[CLS])?;
    let sep = body.iter().position(|&t| t == SEP)?;
    Some((&body[..sep], &body[sep + 1..]))
}

impl TaskRule {
    pub fn draw<R: Rng>(kind: TaskKind, vocab_size: usize, seq_len: usize, rng: &mut R) -> Self {
        let mut content: Vec<usize> = (FIRST_CONTENT..vocab_size).collect();
        content.shuffle(rng);
        let fillers = content.split_off(kind.designated_count());
        Self {
            kind,
            designated: content,
            fillers,
            seq_len,
        }
    }

    /// Noise-free label of a sequence under this rule.
    pub fn label_of(&self, tokens: &[usize]) -> usize {
        let d = &self.designated;
        match self.kind {
            TaskKind::MajorityToken => {
                let a = tokens.iter().filter(|&&t| t == d[0]).count();
                let b = tokens.iter().filter(|&&t| t == d[1]).count();
                usize::from(a > b)
            }
            TaskKind::ContainsPattern => {
                usize::from(tokens.windows(2).any(|w| w[0] == d[0] && w[1] == d[1]))
            }
            TaskKind::PairEquality => match segments(tokens) {
                Some((s1, s2)) => {
                    let topic = |s: &[usize]| s.iter().copied().find(|t| d.contains(t));
                    usize::from(topic(s1).is_some() && topic(s1) == topic(s2))
                }
                None => 0,
            },
            TaskKind::ParityOfMarkedTokens => count_in(tokens, d) % 2,
            TaskKind::FirstLastMatch => match segments(tokens) {
                Some((s1, s2)) => usize::from(
                    !s1.is_empty() && !s2.is_empty() && s1[0] == s2[s2.len() - 1],
                ),
                None => 0,
            },
            TaskKind::CountThreshold => match tokens.iter().filter(|&&t| t == d[0]).count() {
                0 | 1 => 0,
                2 | 3 => 1,
                _ => 2,
            },
        }
    }

    fn filler<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        (0..n)
            .map(|_| self.fillers[rng.random_range(0..self.fillers.len())])
            .collect()
    }

    /// Writes `tokens` into distinct random positions of `seg`.
    fn scatter<R: Rng>(seg: &mut [usize], tokens: &[usize], rng: &mut R) {
        let mut pos: Vec<usize> = (0..seg.len()).collect();
        pos.shuffle(rng);
        for (&p, &t) in pos.iter().zip(tokens) {
            seg[p] = t;
        }
    }

    /// Builds a sequence whose noise-free label is `label`.
    pub fn generate<R: Rng>(&self, label: usize, rng: &mut R) -> Vec<usize> {
        let min_len = self.kind.min_seq_len().max((3 * self.seq_len).div_ceil(4));
        let len = rng.random_range(min_len..=self.seq_len);
        let d = &self.designated;
        let mut out = vec![CLS];
        if self.kind.is_pair() {
            let n = len - 2;
            let mut s1 = self.filler(n / 2, rng);
            let mut s2 = self.filler(n - n / 2, rng);
            match self.kind {
                TaskKind::PairEquality => {
                    let t1 = d[rng.random_range(0..d.len())];
                    let t2 = if label == 1 { t1 } else { other(d, t1, rng) };
                    Self::scatter(&mut s1, &[t1], rng);
                    Self::scatter(&mut s2, &[t2], rng);
                }
                _ => {
                    let first = d[rng.random_range(0..d.len())];
                    let last = if label == 1 { first } else { other(d, first, rng) };
                    s1[0] = first;
                    *s2.last_mut().expect("segment is nonempty") = last;
                }
            }
            out.extend(s1);
            out.push(SEP);
            out.extend(s2);
            return out;
        }

        let n = len - 1;
        let mut body = self.filler(n, rng);
        match self.kind {
            TaskKind::MajorityToken => {
                let hi = rng.random_range(2..=4);
                let lo = rng.random_range(0..hi);
                let (ca, cb) = if label == 1 { (hi, lo) } else { (lo, hi) };
                let mut marks = vec![d[0]; ca];
                marks.extend(std::iter::repeat_n(d[1], cb));
                Self::scatter(&mut body, &marks, rng);
            }
            TaskKind::ContainsPattern => {
                let i = rng.random_range(0..n - 1);
                if label == 1 {
                    body[i] = d[0];
                    body[i + 1] = d[1];
                } else if rng.random_bool(0.5) {
                    // Both tokens present but never adjacent in order.
                    let j = loop {
                        let j = rng.random_range(0..n);
                        if j != i && j != i + 1 {
                            break j;
                        }
                    };
                    body[i] = d[0];
                    body[j] = d[1];
                } else {
                    body[i] = d[rng.random_range(0..2)];
                }
            }
            TaskKind::ParityOfMarkedTokens => {
                let k = if label == 0 {
                    2 * rng.random_range(0..=2)
                } else {
                    1 + 2 * rng.random_range(0..=1)
                };
                let marks: Vec<usize> = (0..k).map(|_| d[rng.random_range(0..d.len())]).collect();
                Self::scatter(&mut body, &marks, rng);
            }
            TaskKind::CountThreshold => {
                let k = 2 * label + rng.random_range(0..=1);
                Self::scatter(&mut body, &vec![d[0]; k], rng);
            }
            TaskKind::PairEquality | TaskKind::FirstLastMatch => unreachable!(),
        }
        out.extend(body);
        out
    }
}

fn other<R: Rng>(set: &[usize], not: usize, rng: &mut R) -> usize {
    let rest: Vec<usize> = set.iter().copied().filter(|&t| t != not).collect();
    rest[rng.random_range(0..rest.len())]
}
