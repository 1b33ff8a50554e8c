//! Stanford Sentiment Treebank ingestion: s-expression tree parsing, score
//! binning, and root/all-node example extraction.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 5;

/// Labeled binary parse tree of one SST sentence. Internal nodes always have
/// exactly two children; leaves carry the token text verbatim (PTB escapes
/// like `-LRB-` are kept as-is).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentimentTree {
    pub label: u8,
    pub node: TreeNode,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TreeNode {
    Leaf { token: String },
    Internal { children: Box<[SentimentTree; 2]> },
}

impl SentimentTree {
    pub fn is_leaf(&self) -> bool {
        matches!(self.node, TreeNode::Leaf { .. })
    }

    pub fn node_count(&self) -> usize {
        match &self.node {
            TreeNode::Leaf { .. } => 1,
            TreeNode::Internal { children } => {
                1 + children[0].node_count() + children[1].node_count()
            }
        }
    }

    pub fn leaf_count(&self) -> usize {
        match &self.node {
            TreeNode::Leaf { .. } => 1,
            TreeNode::Internal { children } => {
                children[0].leaf_count() + children[1].leaf_count()
            }
        }
    }

    /// Ordered tokens covered by this node (a leaf's span is its one token).
    pub fn span(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_span(&mut out);
        out
    }

    fn collect_span<'a>(&'a self, out: &mut Vec<&'a str>) {
        match &self.node {
            TreeNode::Leaf { token } => out.push(token.as_str()),
            TreeNode::Internal { children } => {
                children[0].collect_span(out);
                children[1].collect_span(out);
            }
        }
    }

    /// Depth-first walk over all nodes, root first.
    pub fn visit(&self, f: &mut impl FnMut(&SentimentTree)) {
        f(self);
        if let TreeNode::Internal { children } = &self.node {
            children[0].visit(f);
            children[1].visit(f);
        }
    }

    /// Renders the tree back to its one-line s-expression form.
    pub fn to_sexpr(&self) -> String {
        let mut s = String::new();
        self.render(&mut s);
        s
    }

    fn render(&self, out: &mut String) {
        match &self.node {
            TreeNode::Leaf { token } => {
                out.push('(');
                out.push_str(&self.label.to_string());
                out.push(' ');
                out.push_str(token);
                out.push(')');
            }
            TreeNode::Internal { children } => {
                out.push('(');
                out.push_str(&self.label.to_string());
                out.push(' ');
                children[0].render(out);
                out.push(' ');
                children[1].render(out);
                out.push(')');
            }
        }
    }
}

struct Parser<'a> {
    chars: Vec<char>,
    pos: usize,
    line: usize,
    src: &'a str,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str, line: usize) -> Self {
        Self {
            chars: src.chars().collect(),
            pos: 0,
            line,
            src,
        }
    }

    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line,
            column: self.pos + 1,
            message: message.into(),
        }
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(c) if c.is_whitespace()) {
            self.pos += 1;
        }
    }

    fn expect(&mut self, c: char) -> Result<()> {
        match self.peek() {
            Some(got) if got == c => {
                self.pos += 1;
                Ok(())
            }
            Some(got) => Err(self.err(format!("expected '{c}', found '{got}'"))),
            None => Err(self.err(format!("expected '{c}', found end of line"))),
        }
    }

    fn parse_label(&mut self) -> Result<u8> {
        let start = self.pos;
        while matches!(self.peek(), Some(c) if !c.is_whitespace() && c != '(' && c != ')') {
            self.pos += 1;
        }
        let text: String = self.chars[start..self.pos].iter().collect();
        if text.is_empty() {
            return Err(self.err("missing node label"));
        }
        let value: i64 = text
            .parse()
            .map_err(|_| self.err(format!("non-integer label '{text}'")))?;
        if !(0..NUM_CLASSES as i64).contains(&value) {
            return Err(self.err(format!("label {value} outside 0..={}", NUM_CLASSES - 1)));
        }
        Ok(value as u8)
    }

    fn parse_token(&mut self) -> String {
        let start = self.pos;
        while matches!(self.peek(), Some(c) if !c.is_whitespace() && c != '(' && c != ')') {
            self.pos += 1;
        }
        self.chars[start..self.pos].iter().collect()
    }

    fn parse_node(&mut self) -> Result<SentimentTree> {
        self.expect('(')?;
        self.skip_ws();
        let label = self.parse_label()?;
        self.skip_ws();
        match self.peek() {
            Some('(') => {
                let first = self.parse_node()?;
                self.skip_ws();
                if self.peek() == Some(')') {
                    return Err(self.err("internal node with 1 child (need exactly 2)"));
                }
                let second = self.parse_node()?;
                self.skip_ws();
                if self.peek() == Some('(') {
                    return Err(self.err("internal node with more than 2 children"));
                }
                self.expect(')')?;
                Ok(SentimentTree {
                    label,
                    node: TreeNode::Internal {
                        children: Box::new([first, second]),
                    },
                })
            }
            Some(')') => Err(self.err("node has neither token nor children")),
            Some(_) => {
                let token = self.parse_token();
                self.skip_ws();
                self.expect(')')?;
                Ok(SentimentTree {
                    label,
                    node: TreeNode::Leaf { token },
                })
            }
            None => Err(self.err("unbalanced parentheses (line ended inside node)")),
        }
    }

    fn parse(&mut self) -> Result<SentimentTree> {
        self.skip_ws();
        let tree = self.parse_node()?;
        self.skip_ws();
        if self.pos != self.chars.len() {
            return Err(self.err(format!(
                "trailing input after tree: '{}'",
                &self.src[self.src.len().min(self.pos)..]
            )));
        }
        Ok(tree)
    }
}

/// Parses one PTB-style s-expression line into a [`SentimentTree`].
pub fn parse_tree(line: &str) -> Result<SentimentTree> {
    parse_tree_at(line, 1)
}

/// Same as [`parse_tree`] but reports `line_no` in errors.
pub fn parse_tree_at(line: &str, line_no: usize) -> Result<SentimentTree> {
    Parser::new(line, line_no).parse()
}

/// Dataset split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Dev => write!(f, "dev"),
            Split::Test => write!(f, "test"),
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

/// One labeled classification example extracted from a tree node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub text: Vec<String>,
    pub label: u8,
    pub is_root: bool,
    pub split: Split,
}

/// Which tree nodes become examples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractMode {
    Root,
    All,
}

impl std::str::FromStr for ExtractMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "root" => Ok(ExtractMode::Root),
            "all" => Ok(ExtractMode::All),
            other => Err(Error::Config(format!("unknown extract mode '{other}'"))),
        }
    }
}

/// Extracts labeled examples: `Root` yields one example per tree (root label,
/// full sentence); `All` yields one per node (node label, node span).
pub fn extract_examples(
    trees: &[SentimentTree],
    mode: ExtractMode,
    split: Split,
) -> Vec<LabeledExample> {
    let mut out = Vec::new();
    for tree in trees {
        match mode {
            ExtractMode::Root => out.push(LabeledExample {
                text: tree.span().iter().map(|s| s.to_string()).collect(),
                label: tree.label,
                is_root: true,
                split,
            }),
            ExtractMode::All => {
                let mut is_root = true;
                tree.visit(&mut |node| {
                    out.push(LabeledExample {
                        text: node.span().iter().map(|s| s.to_string()).collect(),
                        label: node.label,
                        is_root,
                        split,
                    });
                    is_root = false;
                });
            }
        }
    }
    out
}

/// Per-class counts over a non-empty example list.
pub fn class_distribution(examples: &[LabeledExample]) -> Result<[usize; NUM_CLASSES]> {
    if examples.is_empty() {
        return Err(Error::Data("class_distribution of empty example list".into()));
    }
    let mut counts = [0usize; NUM_CLASSES];
    for ex in examples {
        counts[ex.label as usize] += 1;
    }
    Ok(counts)
}

/// Number of distinct phrases (space-joined node spans) across all trees.
pub fn unique_phrase_count(trees: &[SentimentTree]) -> usize {
    let mut seen: HashSet<String> = HashSet::new();
    for tree in trees {
        tree.visit(&mut |node| {
            seen.insert(node.span().join(" "));
        });
    }
    seen.len()
}

/// Total number of tree nodes across all trees.
pub fn total_node_count(trees: &[SentimentTree]) -> usize {
    trees.iter().map(|t| t.node_count()).sum()
}

/// Label granularity: the 5-way fine-grained task or the binary task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Granularity {
    Two,
    Five,
}

impl std::str::FromStr for Granularity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "2" => Ok(Granularity::Two),
            "5" => Ok(Granularity::Five),
            other => Err(Error::Config(format!("granularity must be 2 or 5, got '{other}'"))),
        }
    }
}

impl Granularity {
    pub fn num_classes(self) -> usize {
        match self {
            Granularity::Two => 2,
            Granularity::Five => 5,
        }
    }
}

/// Outcome of binning a raw sentiment score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinnedScore {
    Class(u8),
    /// Neutral sample excluded under binary granularity.
    Excluded,
}

/// Maps a raw sentiment score in `[0, 1]` to a class index.
///
/// Five-class cutoffs follow the dataset distribution:
/// `[0, 0.2] (0.2, 0.4] (0.4, 0.6] (0.6, 0.8] (0.8, 1.0]` map to classes
/// 0..=4. Binary granularity keeps `p <= 0.4` as negative and `p > 0.6` as
/// positive; neutral scores are excluded rather than erroring.
pub fn bin_score_to_class(p: f64, granularity: Granularity) -> Result<BinnedScore> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidValue(format!("sentiment score {p} outside [0, 1]")));
    }
    let five = if p <= 0.2 {
        0
    } else if p <= 0.4 {
        1
    } else if p <= 0.6 {
        2
    } else if p <= 0.8 {
        3
    } else {
        4
    };
    Ok(match granularity {
        Granularity::Five => BinnedScore::Class(five),
        Granularity::Two => {
            if p <= 0.4 {
                BinnedScore::Class(0)
            } else if p > 0.6 {
                BinnedScore::Class(1)
            } else {
                BinnedScore::Excluded
            }
        }
    })
}

/// Maps a 5-way tree label to the requested granularity. Under `Two`,
/// classes {0,1} -> negative, {3,4} -> positive, neutral excluded.
pub fn relabel(label: u8, granularity: Granularity) -> BinnedScore {
    match granularity {
        Granularity::Five => BinnedScore::Class(label),
        Granularity::Two => match label {
            0 | 1 => BinnedScore::Class(0),
            3 | 4 => BinnedScore::Class(1),
            _ => BinnedScore::Excluded,
        },
    }
}

/// Parses a one-tree-per-line file. Blank lines are skipped.
pub fn load_tree_file(path: &Path) -> Result<Vec<SentimentTree>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut trees = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        trees.push(parse_tree_at(&line, idx + 1)?);
    }
    Ok(trees)
}

/// The official train/dev/test tree files of one treebank directory.
#[derive(Debug)]
pub struct TreebankSplits {
    pub train: Vec<SentimentTree>,
    pub dev: Vec<SentimentTree>,
    pub test: Vec<SentimentTree>,
}

impl TreebankSplits {
    pub fn total_trees(&self) -> usize {
        self.train.len() + self.dev.len() + self.test.len()
    }

    pub fn split(&self, split: Split) -> &[SentimentTree] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn all_trees(&self) -> impl Iterator<Item = &SentimentTree> {
        self.train.iter().chain(self.dev.iter()).chain(self.test.iter())
    }
}

/// Loads `train.txt`, `dev.txt`, `test.txt` from `dir`.
pub fn load_splits(dir: &Path) -> Result<TreebankSplits> {
    Ok(TreebankSplits {
        train: load_tree_file(&dir.join("train.txt"))?,
        dev: load_tree_file(&dir.join("dev.txt"))?,
        test: load_tree_file(&dir.join("test.txt"))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const SAMPLE: &str = "(3 (2 It) (3 (2 's) (4 good)))";

    #[test]
    fn parses_sample_tree() {
        let tree = parse_tree(SAMPLE).unwrap();
        assert_eq!(tree.label, 3);
        assert_eq!(tree.node_count(), 5);
        assert_eq!(tree.leaf_count(), 3);
        assert_eq!(tree.span(), vec!["It", "'s", "good"]);
    }

    #[test]
    fn parses_single_leaf() {
        let tree = parse_tree("(2 word)").unwrap();
        assert_eq!(tree.label, 2);
        assert!(tree.is_leaf());
        assert_eq!(tree.node_count(), 1);
    }

    #[test]
    fn rejects_unbalanced() {
        let err = parse_tree("(3 (2 It)").unwrap_err();
        match err {
            Error::Parse { line, column, .. } => {
                assert_eq!(line, 1);
                assert!(column > 0);
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_labels_and_arity() {
        assert!(parse_tree("(x word)").is_err());
        assert!(parse_tree("(7 word)").is_err());
        assert!(parse_tree("(-1 word)").is_err());
        assert!(parse_tree("(3 (2 a) (2 b) (2 c))").is_err());
        assert!(parse_tree("(3 (2 a))").is_err());
        assert!(parse_tree("(3 )").is_err());
        assert!(parse_tree("(3 a) b").is_err());
    }

    #[test]
    fn round_trips_modulo_whitespace() {
        let noisy = "(3  (2 It)   (3 (2 's) (4 good)) )";
        let tree = parse_tree(noisy).unwrap();
        assert_eq!(tree.to_sexpr(), SAMPLE);
        assert_eq!(parse_tree(&tree.to_sexpr()).unwrap(), tree);
    }

    #[test]
    fn extract_modes() {
        let tree = parse_tree(SAMPLE).unwrap();
        let trees = vec![tree];
        let roots = extract_examples(&trees, ExtractMode::Root, Split::Train);
        assert_eq!(roots.len(), 1);
        assert_eq!(roots[0].label, 3);
        assert!(roots[0].is_root);
        assert_eq!(roots[0].text, vec!["It", "'s", "good"]);

        let all = extract_examples(&trees, ExtractMode::All, Split::Train);
        assert_eq!(all.len(), 5);
        assert_eq!(all.iter().filter(|e| e.is_root).count(), 1);
    }

    #[test]
    fn class_distribution_counts() {
        let ex = LabeledExample {
            text: vec!["a".into()],
            label: 3,
            is_root: true,
            split: Split::Dev,
        };
        assert_eq!(class_distribution(&[ex]).unwrap(), [0, 0, 0, 1, 0]);
        assert!(class_distribution(&[]).is_err());
    }

    #[test]
    fn bin_endpoints_and_boundaries() {
        use BinnedScore::*;
        assert_eq!(bin_score_to_class(0.0, Granularity::Five).unwrap(), Class(0));
        assert_eq!(bin_score_to_class(1.0, Granularity::Five).unwrap(), Class(4));
        // closed upper bound of the first bin
        assert_eq!(bin_score_to_class(0.2, Granularity::Five).unwrap(), Class(0));
        assert_eq!(bin_score_to_class(0.4, Granularity::Five).unwrap(), Class(1));
        assert_eq!(bin_score_to_class(0.6, Granularity::Five).unwrap(), Class(2));
        assert_eq!(bin_score_to_class(0.8, Granularity::Five).unwrap(), Class(3));
        assert_eq!(bin_score_to_class(0.81, Granularity::Five).unwrap(), Class(4));
        assert_eq!(bin_score_to_class(0.5, Granularity::Two).unwrap(), Excluded);
        assert_eq!(bin_score_to_class(0.4, Granularity::Two).unwrap(), Class(0));
        assert_eq!(bin_score_to_class(0.61, Granularity::Two).unwrap(), Class(1));
        assert!(bin_score_to_class(-0.1, Granularity::Five).is_err());
        assert!(bin_score_to_class(1.1, Granularity::Five).is_err());
    }

    #[test]
    fn jsonl_shape() {
        let ex = LabeledExample {
            text: vec!["good".into(), "movie".into()],
            label: 4,
            is_root: true,
            split: Split::Train,
        };
        let json = serde_json::to_string(&ex).unwrap();
        assert_eq!(
            json,
            r#"{"text":["good","movie"],"label":4,"is_root":true,"split":"train"}"#
        );
    }

    fn arb_tree() -> impl Strategy<Value = SentimentTree> {
        let leaf = (0u8..5, "[a-z]{1,6}").prop_map(|(label, token)| SentimentTree {
            label,
            node: TreeNode::Leaf { token },
        });
        leaf.prop_recursive(4, 32, 2, |inner| {
            (0u8..5, inner.clone(), inner).prop_map(|(label, a, b)| SentimentTree {
                label,
                node: TreeNode::Internal {
                    children: Box::new([a, b]),
                },
            })
        })
    }

    proptest! {
        #[test]
        fn render_parse_round_trip(tree in arb_tree()) {
            let rendered = tree.to_sexpr();
            let reparsed = parse_tree(&rendered).unwrap();
            prop_assert_eq!(&reparsed, &tree);
        }

        #[test]
        fn binary_tree_identity(tree in arb_tree()) {
            // leaves = internal nodes + 1
            let internal = tree.node_count() - tree.leaf_count();
            prop_assert_eq!(tree.leaf_count(), internal + 1);
        }

        #[test]
        fn all_mode_yields_node_count(tree in arb_tree()) {
            let trees = vec![tree];
            let all = extract_examples(&trees, ExtractMode::All, Split::Test);
            prop_assert_eq!(all.len(), total_node_count(&trees));
            let roots = extract_examples(&trees, ExtractMode::Root, Split::Test);
            prop_assert_eq!(roots.len(), trees.len());
        }
    }
}
