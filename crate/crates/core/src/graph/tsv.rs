//! Edge-list persistence: one undirected edge per line, `keyA\tkeyB` with
//! keyA < keyB, lines sorted. A node sidecar (`key\tkind\tsemantic_type`)
//! keeps isolated nodes and coded-term types.

use std::io::{BufRead, Write};

use super::{GraphError, NodeKey, NodeKind, SemanticGraph};

pub fn write_tsv(w: &mut dyn Write, graph: &SemanticGraph) -> Result<(), GraphError> {
    for (a, b) in graph.edges() {
        writeln!(w, "{a}\t{b}")?;
    }
    Ok(())
}

fn malformed(line: usize, message: impl Into<String>) -> GraphError {
    GraphError::Malformed {
        line,
        message: message.into(),
    }
}

fn parse_key(line: usize, field: &str) -> Result<NodeKey, GraphError> {
    field.parse().map_err(|e| malformed(line, format!("{e}")))
}

pub fn read_tsv<R: BufRead>(r: R) -> Result<SemanticGraph, GraphError> {
    let mut g = SemanticGraph::new();
    for (i, line) in r.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(malformed(line_no, format!("expected 2 fields, found {}", fields.len())));
        }
        let a = parse_key(line_no, fields[0])?;
        let b = parse_key(line_no, fields[1])?;
        if a == b {
            return Err(malformed(line_no, "self-loop"));
        }
        g.add_edge(a, b).map_err(|e| malformed(line_no, e.to_string()))?;
    }
    Ok(g)
}

pub fn write_nodes(w: &mut dyn Write, graph: &SemanticGraph) -> Result<(), GraphError> {
    for key in graph.nodes() {
        let ty = graph.semantic_type(key).unwrap_or("-");
        writeln!(w, "{key}\t{}\t{ty}", key.kind())?;
    }
    Ok(())
}

/// Adds sidecar nodes and semantic types to a graph read with [`read_tsv`].
pub fn read_nodes<R: BufRead>(r: R, graph: &mut SemanticGraph) -> Result<(), GraphError> {
    for (i, line) in r.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(malformed(line_no, format!("expected 3 fields, found {}", fields.len())));
        }
        let key = parse_key(line_no, fields[0])?;
        if NodeKind::from_name(fields[1]) != Some(key.kind()) {
            return Err(malformed(line_no, format!("kind {:?} does not match key", fields[1])));
        }
        if fields[2] != "-" {
            if key.kind() != NodeKind::CodedTerm {
                return Err(malformed(line_no, "semantic type on a non-term node"));
            }
            graph.declare_term(key, fields[2]);
        } else {
            graph.add_node(key);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_graph(seed: u64, edges: usize) -> SemanticGraph {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut g = SemanticGraph::new();
        let kinds = [NodeKind::Sentence, NodeKind::Predicate, NodeKind::Lemma, NodeKind::CodedTerm];
        while g.edge_count() < edges {
            let ka = kinds[rng.gen_range(0..kinds.len())];
            let kb = kinds[rng.gen_range(0..kinds.len())];
            if !super::super::edge_allowed(ka, kb) {
                continue;
            }
            let a = NodeKey::new(ka, format!("n{}", rng.gen_range(0..300)));
            let b = NodeKey::new(kb, format!("n{}", rng.gen_range(0..300)));
            if a != b {
                g.add_edge(a, b).unwrap();
            }
        }
        g
    }

    #[test]
    fn empty_graph_empty_file() {
        let mut buf = Vec::new();
        write_tsv(&mut buf, &SemanticGraph::new()).unwrap();
        assert!(buf.is_empty());
    }

    #[test]
    fn roundtrip_1k_edges_sorted_and_deterministic() {
        let mut g = random_graph(1, 1000);
        g.declare_term(NodeKey::new(NodeKind::CodedTerm, "lonely"), "dsyn");
        let mut edges = Vec::new();
        write_tsv(&mut edges, &g).unwrap();
        let mut nodes = Vec::new();
        write_nodes(&mut nodes, &g).unwrap();

        let text = String::from_utf8(edges.clone()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1000);
        let mut sorted = lines.clone();
        sorted.sort();
        assert_eq!(lines, sorted);
        for l in &lines {
            let (a, b) = l.split_once('\t').unwrap();
            assert!(a < b);
        }

        let mut back = read_tsv(&edges[..]).unwrap();
        read_nodes(&nodes[..], &mut back).unwrap();
        assert_eq!(back, g);

        let mut again = Vec::new();
        write_tsv(&mut again, &back).unwrap();
        assert_eq!(again, edges);
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let cases = [
            ("s:a:0\ts:a:1\ns:a:1\n", 2),
            ("s:a:0\ts:a:1\n\nq:x\ts:a:1\n", 3),
            ("l:x\tc:y\n", 1),
            ("s:a\ts:a\n", 1),
        ];
        for (text, line) in cases {
            match read_tsv(text.as_bytes()) {
                Err(GraphError::Malformed { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }
}
