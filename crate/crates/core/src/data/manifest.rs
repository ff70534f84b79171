use std::fmt::Write as _;

use super::{ClientDataset, DataError, Population};

const HEADER: &str = "pefll-population 1";

/// Plain-text description of a population, sufficient to rebuild it exactly
/// against the same dataset. Floats use shortest round-trip formatting.
pub fn write_manifest(pop: &Population) -> String {
    let mut s = String::new();
    let join = |v: &mut dyn Iterator<Item = String>| v.collect::<Vec<_>>().join(" ");
    writeln!(s, "{HEADER}").unwrap();
    writeln!(s, "clients {}", pop.clients.len()).unwrap();
    writeln!(s, "seen {}", join(&mut pop.seen_ids.iter().map(u32::to_string))).unwrap();
    writeln!(s, "unseen {}", join(&mut pop.unseen_ids.iter().map(u32::to_string))).unwrap();
    for c in &pop.clients {
        writeln!(s, "client {}", c.client_id).unwrap();
        writeln!(s, "pi {}", join(&mut c.proportions.iter().map(|p| format!("{p:?}")))).unwrap();
        writeln!(s, "train {}", join(&mut c.train.iter().map(usize::to_string))).unwrap();
        writeln!(s, "val {}", join(&mut c.val.iter().map(usize::to_string))).unwrap();
        writeln!(s, "test {}", join(&mut c.test.iter().map(usize::to_string))).unwrap();
    }
    s
}

pub fn read_manifest(text: &str) -> Result<Population, DataError> {
    let mut offset = 0usize;
    let mut lines = text.lines().map(|l| {
        let at = offset;
        offset += l.len() + 1;
        (at, l)
    });
    let mut next = |key: &str| -> Result<(usize, String), DataError> {
        let (at, line) = lines.next().ok_or(DataError::Parse { offset: text.len(), msg: format!("missing `{key}` line") })?;
        let rest = line
            .strip_prefix(key)
            .filter(|r| r.is_empty() || r.starts_with(' '))
            .ok_or(DataError::Parse { offset: at, msg: format!("expected `{key}`") })?;
        Ok((at, rest.trim().to_string()))
    };
    fn nums<T: std::str::FromStr>(at: usize, s: &str) -> Result<Vec<T>, DataError> {
        s.split_whitespace()
            .map(|t| t.parse().map_err(|_| DataError::Parse { offset: at, msg: format!("bad number `{t}`") }))
            .collect()
    }
    let (at, h) = next("pefll-population")?;
    if h != "1" {
        return Err(DataError::Parse { offset: at, msg: format!("unsupported manifest version {h}") });
    }
    let (at, n) = next("clients")?;
    let n: usize = n.parse().map_err(|_| DataError::Parse { offset: at, msg: "bad client count".into() })?;
    let (at, seen) = next("seen")?;
    let seen_ids = nums(at, &seen)?;
    let (at, unseen) = next("unseen")?;
    let unseen_ids = nums(at, &unseen)?;
    let mut clients = Vec::with_capacity(n);
    for i in 0..n {
        let (at, id) = next("client")?;
        let client_id: u32 = id.parse().map_err(|_| DataError::Parse { offset: at, msg: "bad client id".into() })?;
        if client_id as usize != i {
            return Err(DataError::Parse { offset: at, msg: format!("client {client_id} out of order, expected {i}") });
        }
        let (at, pi) = next("pi")?;
        let proportions = nums(at, &pi)?;
        let (at, tr) = next("train")?;
        let train = nums(at, &tr)?;
        let (at, va) = next("val")?;
        let val = nums(at, &va)?;
        let (at, te) = next("test")?;
        let test = nums(at, &te)?;
        clients.push(ClientDataset { client_id, train, val, test, proportions });
    }
    Ok(Population { clients, seen_ids, unseen_ids })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trips() {
        let pop = Population {
            clients: vec![
                ClientDataset { client_id: 0, train: vec![3, 1], val: vec![], test: vec![7], proportions: vec![0.1, 0.9] },
                ClientDataset {
                    client_id: 1,
                    train: vec![0],
                    val: vec![2],
                    test: vec![],
                    proportions: vec![1.0 / 3.0, 2.0 / 3.0],
                },
            ],
            seen_ids: vec![1],
            unseen_ids: vec![0],
        };
        assert_eq!(read_manifest(&write_manifest(&pop)).unwrap(), pop);
    }

    #[test]
    fn malformed_manifest_rejected() {
        assert!(read_manifest("pefll-population 2\n").is_err());
        assert!(read_manifest("pefll-population 1\nclients 1\nseen 0\nunseen\nclient 0\npi x\n").is_err());
    }
}
