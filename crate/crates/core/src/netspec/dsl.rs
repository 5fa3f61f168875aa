//! Line-oriented architecture DSL.
//!
//! ```text
//! # comment
//! name resnet-toy
//! input 3 64 64
//! conv 7 2 3 16          # kernel stride padding out_channels [bias] [@name]
//! bn
//! relu
//! maxpool 3 2 1          # kernel stride padding
//! resblock @block1 {
//!   conv 3 1 1 16
//!   bn
//!   relu
//!   conv 3 1 1 16
//!   bn
//! } shortcut {
//! }
//! relu
//! gap
//! fc 2
//! ```
//!
//! Kernels and strides are a single integer or `RxC`; padding is a single
//! integer or `top,bottom,left,right`. A resblock without a `shortcut`
//! section uses the identity shortcut. Every layer line may end with
//! `@name` to name its node; other nodes are named `<kind><counter>`.

use std::collections::HashSet;
use std::fmt;

use crate::autograd::{infer_shape, Chw, ConvGeom, NodeDef, NodeKind, Padding, Topology, Window};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum LayerOp {
    Conv { window: Window, out_ch: usize, bias: bool },
    MaxPool(Window),
    AvgPool(Window),
    Relu,
    BatchNorm,
    Fc { out: usize },
    Gap,
    ResBlock { main: Vec<Layer>, shortcut: Vec<Layer> },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Layer {
    pub op: LayerOp,
    pub name: Option<String>,
}

impl Layer {
    pub fn new(op: LayerOp) -> Self {
        Layer { op, name: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ArchSpec {
    pub name: String,
    /// (channels, rows, cols)
    pub input: Chw,
    pub layers: Vec<Layer>,
}

impl ArchSpec {
    pub fn parse(text: &str) -> Result<ArchSpec> {
        Parser::new(text).parse()
    }

    /// Node graph of this spec; fails only for hand-built inconsistent specs.
    pub fn topology(&self) -> Result<Topology> {
        let mut reserved = HashSet::new();
        collect_names(&self.layers, &mut reserved);
        let mut lw = Lowering { nodes: Vec::new(), counters: Default::default(), reserved };
        lw.nodes.push(NodeDef { name: "input".into(), kind: NodeKind::Input, parents: vec![], out: self.input });
        lw.layers(&self.layers, 0)?;
        Topology::new(lw.nodes)
    }

    /// Visits every layer depth-first; the flag is true inside shortcut branches.
    pub fn visit(&self, f: &mut impl FnMut(&Layer, bool)) {
        fn walk(layers: &[Layer], in_shortcut: bool, f: &mut impl FnMut(&Layer, bool)) {
            for l in layers {
                f(l, in_shortcut);
                if let LayerOp::ResBlock { main, shortcut } = &l.op {
                    walk(main, in_shortcut, f);
                    walk(shortcut, true, f);
                }
            }
        }
        walk(&self.layers, false, f);
    }
}

fn collect_names(layers: &[Layer], out: &mut HashSet<String>) {
    for l in layers {
        if let Some(n) = &l.name {
            out.insert(n.clone());
        }
        if let LayerOp::ResBlock { main, shortcut } = &l.op {
            collect_names(main, out);
            collect_names(shortcut, out);
        }
    }
}

struct Lowering {
    nodes: Vec<NodeDef>,
    counters: std::collections::HashMap<&'static str, usize>,
    reserved: HashSet<String>,
}

impl Lowering {
    fn auto_name(&mut self, kind: &'static str) -> String {
        loop {
            let c = self.counters.entry(kind).or_insert(0);
            *c += 1;
            let name = format!("{kind}{c}");
            if !self.reserved.contains(&name) {
                return name;
            }
        }
    }

    fn push(&mut self, layer_name: &Option<String>, kind: NodeKind, parents: Vec<usize>) -> Result<usize> {
        let name = match layer_name {
            Some(n) => n.clone(),
            None => self.auto_name(kind.label()),
        };
        let shapes: Vec<Chw> = parents.iter().map(|&p| self.nodes[p].out).collect();
        let out = infer_shape(&name, &kind, &shapes)?;
        self.nodes.push(NodeDef { name, kind, parents, out });
        Ok(self.nodes.len() - 1)
    }

    fn layers(&mut self, layers: &[Layer], mut cur: usize) -> Result<usize> {
        for l in layers {
            let [c, h, w] = self.nodes[cur].out;
            let kind = match &l.op {
                LayerOp::Conv { window, out_ch, bias } => {
                    NodeKind::Conv(ConvGeom { in_ch: c, out_ch: *out_ch, window: *window, bias: *bias })
                }
                LayerOp::MaxPool(win) => NodeKind::MaxPool(*win),
                LayerOp::AvgPool(win) => NodeKind::AvgPool(*win),
                LayerOp::Relu => NodeKind::Relu,
                LayerOp::BatchNorm => NodeKind::BatchNorm { channels: c },
                LayerOp::Fc { out } => NodeKind::Linear { in_features: c * h * w, out_features: *out },
                LayerOp::Gap => NodeKind::GlobalAvgPool,
                LayerOp::ResBlock { main, shortcut } => {
                    let m = self.layers(main, cur)?;
                    let s = self.layers(shortcut, cur)?;
                    cur = self.push(&l.name, NodeKind::Add, vec![m, s])?;
                    continue;
                }
            };
            cur = self.push(&l.name, kind, vec![cur])?;
        }
        Ok(cur)
    }
}

/// How a nested block ended.
#[derive(Debug, PartialEq)]
enum End {
    Eof,
    Close,
    Shortcut,
}

#[derive(Clone, Copy)]
struct Token<'a> {
    col: usize,
    text: &'a str,
}

struct Line<'a> {
    no: usize,
    tokens: Vec<Token<'a>>,
}

struct Parser<'a> {
    lines: Vec<Line<'a>>,
    pos: usize,
    names: HashSet<String>,
    last_line: usize,
}

fn err(line: usize, col: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, col, msg: msg.into() }
}

impl<'a> Parser<'a> {
    fn new(text: &'a str) -> Self {
        let mut lines = Vec::new();
        let mut last_line = 0;
        for (i, raw) in text.lines().enumerate() {
            last_line = i + 1;
            let content = raw.split('#').next().unwrap_or("");
            let mut tokens = Vec::new();
            let mut start = None;
            for (ci, ch) in content.char_indices().chain(std::iter::once((content.len(), ' '))) {
                match (ch.is_whitespace(), start) {
                    (false, None) => start = Some(ci),
                    (true, Some(s)) => {
                        let col = content[..s].chars().count() + 1;
                        tokens.push(Token { col, text: &content[s..ci] });
                        start = None;
                    }
                    _ => {}
                }
            }
            if !tokens.is_empty() {
                lines.push(Line { no: i + 1, tokens });
            }
        }
        Parser { lines, pos: 0, names: HashSet::new(), last_line }
    }

    fn parse(mut self) -> Result<ArchSpec> {
        let mut name = None;
        let mut input = None;
        while let Some(line) = self.lines.get(self.pos) {
            let head = &line.tokens[0];
            match head.text {
                "name" => {
                    if line.tokens.len() != 2 {
                        return Err(err(line.no, head.col, "expected: name <identifier>"));
                    }
                    name = Some(line.tokens[1].text.to_string());
                }
                "input" => {
                    if line.tokens.len() != 4 {
                        return Err(err(line.no, head.col, "expected: input <channels> <rows> <cols>"));
                    }
                    let mut dims = [0; 3];
                    for (d, t) in dims.iter_mut().zip(&line.tokens[1..]) {
                        *d = positive(line.no, t, "input dimension")?;
                    }
                    input = Some(dims);
                }
                _ => break,
            }
            self.pos += 1;
        }
        let input = input.ok_or_else(|| {
            let (no, col) = self.lines.get(self.pos).map_or((self.last_line.max(1), 1), |l| (l.no, l.tokens[0].col));
            err(no, col, "missing 'input <channels> <rows> <cols>' before the first layer")
        })?;
        let (layers, _, end) = self.block(input)?;
        match end {
            End::Eof => {}
            End::Close | End::Shortcut => {
                let line = &self.lines[self.pos - 1];
                return Err(err(line.no, line.tokens[0].col, "unbalanced '}' with no open resblock"));
            }
        }
        Ok(ArchSpec { name: name.unwrap_or_else(|| "net".into()), input, layers })
    }

    /// Parses layers until EOF or a closing line, tracking shapes.
    fn block(&mut self, mut shape: Chw) -> Result<(Vec<Layer>, Chw, End)> {
        let mut layers = Vec::new();
        while self.pos < self.lines.len() {
            let no = self.lines[self.pos].no;
            let owned: Vec<Token<'a>> = self.lines[self.pos].tokens.clone();
            self.pos += 1;
            let toks: Vec<&Token> = owned.iter().collect();
            let head = toks[0];
            match head.text {
                "}" => {
                    return match toks.get(1..).unwrap_or_default() {
                        [] => Ok((layers, shape, End::Close)),
                        [kw, brace] if kw.text == "shortcut" && brace.text == "{" => Ok((layers, shape, End::Shortcut)),
                        [t, ..] => Err(err(no, t.col, "expected '}' or '} shortcut {'")),
                    };
                }
                "name" | "input" => return Err(err(no, head.col, format!("'{}' must precede all layers", head.text))),
                _ => {}
            }
            // Trailing @name and, for resblocks, '{'.
            let mut args: Vec<&Token> = toks[1..].to_vec();
            let opens = head.text == "resblock";
            if opens {
                match args.pop() {
                    Some(t) if t.text == "{" => {}
                    _ => return Err(err(no, head.col, "expected: resblock [@name] {")),
                }
            }
            let name = match args.last() {
                Some(t) if t.text.starts_with('@') => {
                    let n = &t.text[1..];
                    if n.is_empty() || n == "input" {
                        return Err(err(no, t.col, "invalid layer name"));
                    }
                    if !self.names.insert(n.to_string()) {
                        return Err(err(no, t.col, format!("duplicate layer name '{n}'")));
                    }
                    args.pop();
                    Some(n.to_string())
                }
                _ => None,
            };
            let arity = |args: &[&Token], n: usize, usage: &str| -> Result<()> {
                if args.len() == n {
                    Ok(())
                } else {
                    Err(err(no, head.col, format!("expected: {usage}")))
                }
            };
            let op = match head.text {
                "conv" => {
                    let bias = args.last().is_some_and(|t| t.text == "bias");
                    if bias {
                        args.pop();
                    }
                    arity(&args, 4, "conv <kernel> <stride> <padding> <out_channels> [bias] [@name]")?;
                    let window = window(no, &args[..3])?;
                    let out_ch = positive(no, args[3], "output channels")?;
                    LayerOp::Conv { window, out_ch, bias }
                }
                "maxpool" | "avgpool" => {
                    arity(&args, 3, &format!("{} <kernel> <stride> <padding> [@name]", head.text))?;
                    let w = window(no, &args)?;
                    if head.text == "maxpool" {
                        LayerOp::MaxPool(w)
                    } else {
                        LayerOp::AvgPool(w)
                    }
                }
                "relu" | "bn" | "gap" => {
                    arity(&args, 0, &format!("{} [@name]", head.text))?;
                    match head.text {
                        "relu" => LayerOp::Relu,
                        "bn" => LayerOp::BatchNorm,
                        _ => LayerOp::Gap,
                    }
                }
                "fc" => {
                    arity(&args, 1, "fc <out_features> [@name]")?;
                    LayerOp::Fc { out: positive(no, args[0], "fc width")? }
                }
                "resblock" => {
                    arity(&args, 0, "resblock [@name] {")?;
                    let (main, main_shape, end) = self.block(shape)?;
                    let (shortcut, short_shape) = match end {
                        End::Eof => return Err(err(no, head.col, "unclosed resblock")),
                        End::Close => (Vec::new(), shape),
                        End::Shortcut => {
                            let (s, sh, end) = self.block(shape)?;
                            if end != End::Close {
                                return Err(err(no, head.col, "unclosed resblock shortcut"));
                            }
                            (s, sh)
                        }
                    };
                    if main_shape != short_shape {
                        return Err(err(
                            no,
                            head.col,
                            format!("resblock branches disagree: main {main_shape:?}, shortcut {short_shape:?}"),
                        ));
                    }
                    layers.push(Layer { op: LayerOp::ResBlock { main, shortcut }, name });
                    shape = main_shape;
                    continue;
                }
                other => return Err(err(no, head.col, format!("unknown op '{other}'"))),
            };
            shape = next_shape(&op, shape).map_err(|e| err(no, head.col, e))?;
            layers.push(Layer { op, name });
        }
        Ok((layers, shape, End::Eof))
    }
}

fn next_shape(op: &LayerOp, [c, h, w]: Chw) -> std::result::Result<Chw, String> {
    let kind = match op {
        LayerOp::Conv { window, out_ch, bias } => {
            NodeKind::Conv(ConvGeom { in_ch: c, out_ch: *out_ch, window: *window, bias: *bias })
        }
        LayerOp::MaxPool(win) => NodeKind::MaxPool(*win),
        LayerOp::AvgPool(win) => NodeKind::AvgPool(*win),
        LayerOp::Relu => NodeKind::Relu,
        LayerOp::BatchNorm => NodeKind::BatchNorm { channels: c },
        LayerOp::Fc { out } => NodeKind::Linear { in_features: c * h * w, out_features: *out },
        LayerOp::Gap => NodeKind::GlobalAvgPool,
        LayerOp::ResBlock { .. } => unreachable!("resblocks are shaped by the parser"),
    };
    infer_shape("layer", &kind, &[[c, h, w]]).map_err(|e| match e {
        Error::Shape { msg, .. } => format!("shape inconsistency: {msg}"),
        other => other.to_string(),
    })
}

fn positive(line: usize, t: &Token, what: &str) -> Result<usize> {
    match t.text.parse::<usize>() {
        Ok(0) => Err(err(line, t.col, format!("non-positive {what}"))),
        Ok(v) => Ok(v),
        Err(_) => Err(err(line, t.col, format!("{what} must be a positive integer, got '{}'", t.text))),
    }
}

fn pair(line: usize, t: &Token, what: &str) -> Result<[usize; 2]> {
    let parse_one = |s: &str| -> Result<usize> {
        match s.parse::<usize>() {
            Ok(0) => Err(err(line, t.col, format!("non-positive {what}"))),
            Ok(v) => Ok(v),
            Err(_) => Err(err(line, t.col, format!("{what} must be N or RxC, got '{}'", t.text))),
        }
    };
    match t.text.split_once('x') {
        Some((a, b)) => Ok([parse_one(a)?, parse_one(b)?]),
        None => {
            let v = parse_one(t.text)?;
            Ok([v, v])
        }
    }
}

fn padding(line: usize, t: &Token) -> Result<Padding> {
    let vals: std::result::Result<Vec<usize>, _> = t.text.split(',').map(str::parse::<usize>).collect();
    match vals.as_deref() {
        Ok([p]) => Ok(Padding::uniform(*p)),
        Ok([top, bottom, left, right]) => Ok(Padding { top: *top, bottom: *bottom, left: *left, right: *right }),
        _ => Err(err(line, t.col, format!("padding must be N or top,bottom,left,right, got '{}'", t.text))),
    }
}

fn window(line: usize, args: &[&Token]) -> Result<Window> {
    Ok(Window {
        kernel: pair(line, args[0], "kernel")?,
        stride: pair(line, args[1], "stride")?,
        padding: padding(line, args[2])?,
    })
}

struct Dims([usize; 2]);

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0[0] == self.0[1] {
            write!(f, "{}", self.0[0])
        } else {
            write!(f, "{}x{}", self.0[0], self.0[1])
        }
    }
}

struct Pad(Padding);

impl fmt::Display for Pad {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = self.0;
        if p.is_uniform() {
            write!(f, "{}", p.top)
        } else {
            write!(f, "{},{},{},{}", p.top, p.bottom, p.left, p.right)
        }
    }
}

fn write_window(f: &mut fmt::Formatter<'_>, w: &Window) -> fmt::Result {
    write!(f, " {} {} {}", Dims(w.kernel), Dims(w.stride), Pad(w.padding))
}

fn write_layers(f: &mut fmt::Formatter<'_>, layers: &[Layer], depth: usize) -> fmt::Result {
    let indent = "  ".repeat(depth);
    for l in layers {
        write!(f, "{indent}")?;
        let label = l.name.as_ref().map(|n| format!(" @{n}")).unwrap_or_default();
        match &l.op {
            LayerOp::Conv { window, out_ch, bias } => {
                write!(f, "conv")?;
                write_window(f, window)?;
                write!(f, " {out_ch}{}", if *bias { " bias" } else { "" })?;
            }
            LayerOp::MaxPool(w) => {
                write!(f, "maxpool")?;
                write_window(f, w)?;
            }
            LayerOp::AvgPool(w) => {
                write!(f, "avgpool")?;
                write_window(f, w)?;
            }
            LayerOp::Relu => write!(f, "relu")?,
            LayerOp::BatchNorm => write!(f, "bn")?,
            LayerOp::Fc { out } => write!(f, "fc {out}")?,
            LayerOp::Gap => write!(f, "gap")?,
            LayerOp::ResBlock { main, shortcut } => {
                writeln!(f, "resblock{label} {{")?;
                write_layers(f, main, depth + 1)?;
                if !shortcut.is_empty() {
                    writeln!(f, "{indent}}} shortcut {{")?;
                    write_layers(f, shortcut, depth + 1)?;
                }
                writeln!(f, "{indent}}}")?;
                continue;
            }
        }
        writeln!(f, "{label}")?;
    }
    Ok(())
}

impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "name {}", self.name)?;
        writeln!(f, "input {} {} {}", self.input[0], self.input[1], self.input[2])?;
        write_layers(f, &self.layers, 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse_err(text: &str) -> (usize, usize, String) {
        match ArchSpec::parse(text) {
            Err(Error::Parse { line, col, msg }) => (line, col, msg),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn stem_shapes() {
        let spec = ArchSpec::parse("input 3 224 224\nconv 7 2 3 64\nrelu\n").unwrap();
        let topo = spec.topology().unwrap();
        assert_eq!(topo.len(), 3);
        assert_eq!(topo.nodes()[1].out, [64, 112, 112]);
        assert_eq!(topo.nodes()[1].name, "conv1");
    }

    #[test]
    fn zero_kernel_rejected() {
        let (line, col, msg) = parse_err("input 3 32 32\nconv 0 1 0 8\n");
        assert_eq!((line, col), (2, 6));
        assert!(msg.contains("non-positive kernel"), "{msg}");
    }

    #[test]
    fn unknown_op() {
        let (line, _, msg) = parse_err("input 1 8 8\n\n  dropout 0.5\n");
        assert_eq!(line, 3);
        assert!(msg.contains("unknown op 'dropout'"));
    }

    #[test]
    fn unbalanced_braces() {
        let (line, _, msg) = parse_err("input 1 8 8\nresblock {\nrelu\n");
        assert_eq!(line, 2);
        assert!(msg.contains("unclosed"));
        let (line, _, msg) = parse_err("input 1 8 8\nrelu\n}\n");
        assert_eq!(line, 3);
        assert!(msg.contains("unbalanced"));
    }

    #[test]
    fn shape_inconsistency() {
        let (line, _, msg) = parse_err("input 1 4 4\nconv 5 1 0 2\n");
        assert_eq!(line, 2);
        assert!(msg.contains("shape"), "{msg}");
        let (line, _, msg) =
            parse_err("input 4 8 8\nresblock {\nconv 3 2 1 8\n} shortcut {\nconv 1 1 0 8\n}\n");
        assert_eq!(line, 2);
        assert!(msg.contains("disagree"), "{msg}");
    }

    #[test]
    fn missing_input() {
        let (line, _, msg) = parse_err("name x\nrelu\n");
        assert_eq!(line, 2);
        assert!(msg.contains("missing 'input"));
    }

    #[test]
    fn names_and_asymmetric_geometry() {
        let text = "name t\ninput 2 9 9\nconv 4 2 1,2,1,2 3 bias @stem\nresblock @b {\n  relu\n}\nmaxpool 3x2 2x1 1 @pool\n";
        let spec = ArchSpec::parse(text).unwrap();
        assert_eq!(spec.to_string(), text);
        let topo = spec.topology().unwrap();
        let names: Vec<&str> = topo.nodes().iter().map(|n| n.name.as_str()).collect();
        assert_eq!(names, ["input", "stem", "relu1", "b", "pool"]);
        assert_eq!(topo.nodes()[1].out, [3, 5, 5]);
        assert_eq!(topo.nodes()[3].parents, vec![2, 1]);
    }

    #[test]
    fn duplicate_names() {
        let (_, _, msg) = parse_err("input 1 4 4\nrelu @a\nrelu @a\n");
        assert!(msg.contains("duplicate"));
    }
}
