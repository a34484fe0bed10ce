//! Federation CSV: header `client_id,split,y,x0,..,x{d-1}`, one row per sample,
//! `split` is `train` or `test`. Floats use the shortest round-trip decimal
//! form, so a write/read cycle is lossless.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use super::ClientDataset;
use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;

pub fn write_federation_csv<W: Write>(out: W, clients: &[ClientDataset]) -> Result<()> {
    let d = clients.iter().map(ClientDataset::input_dim).max().unwrap_or(0);
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let mut header = vec!["client_id".to_string(), "split".to_string(), "y".to_string()];
    header.extend((0..d).map(|k| format!("x{k}")));
    w.write_record(&header)?;
    let mut record: Vec<String> = Vec::with_capacity(d + 3);
    for c in clients {
        for (split, x, y) in [("train", &c.x_train, &c.y_train), ("test", &c.x_test, &c.y_test)] {
            for i in 0..y.len() {
                record.clear();
                record.push(c.client_id.to_string());
                record.push(split.to_string());
                record.push(format!("{}", y[i]));
                record.extend(x.row(i).iter().map(|v| format!("{v}")));
                w.write_record(&record)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Default)]
struct Rows {
    train_x: Vec<f64>,
    train_y: Vec<f64>,
    test_x: Vec<f64>,
    test_y: Vec<f64>,
}

pub fn read_federation_csv<R: Read>(input: R) -> Result<Vec<ClientDataset>> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let headers = r.headers()?.clone();
    if headers.len() < 3
        || &headers[0] != "client_id"
        || &headers[1] != "split"
        || &headers[2] != "y"
    {
        return Err(Error::Data("expected header `client_id,split,y,x0,...`".into()));
    }
    for (k, h) in headers.iter().skip(3).enumerate() {
        if h != format!("x{k}") {
            return Err(Error::Data(format!("feature column {k} is named `{h}`, expected `x{k}`")));
        }
    }
    let d = headers.len() - 3;
    let mut by_client: BTreeMap<usize, Rows> = BTreeMap::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| Error::Data(format!("data row {}: {what}", line + 1));
        let client: usize = rec[0].parse().map_err(|_| bad("client_id is not an integer"))?;
        let y: f64 = rec[2].parse().map_err(|_| bad("y is not a number"))?;
        let mut x = Vec::with_capacity(d);
        for field in rec.iter().skip(3) {
            let v: f64 = field.parse().map_err(|_| bad("feature is not a number"))?;
            if !v.is_finite() {
                return Err(bad("feature is not finite"));
            }
            x.push(v);
        }
        let rows = by_client.entry(client).or_default();
        match &rec[1] {
            "train" => {
                rows.train_x.extend(x);
                rows.train_y.push(y);
            }
            "test" => {
                rows.test_x.extend(x);
                rows.test_y.push(y);
            }
            other => return Err(bad(&format!("unknown split `{other}`"))),
        }
    }
    by_client
        .into_iter()
        .map(|(id, rows)| {
            let x_train = DenseMatrix::from_vec(rows.train_y.len(), d, rows.train_x)?;
            let x_test = DenseMatrix::from_vec(rows.test_y.len(), d, rows.test_x)?;
            ClientDataset::new(id, x_train, rows.train_y, x_test, rows.test_y)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_synthetic_federation, SynthConfig};
    use proptest::prelude::*;

    #[test]
    fn header_and_row_count() {
        let cfg = SynthConfig {
            clients: 3,
            input_dim: 4,
            hidden: 4,
            n_train: 5,
            n_test: 2,
            ..SynthConfig::default()
        };
        let (clients, _) = generate_synthetic_federation(&cfg).unwrap();
        let mut buf = Vec::new();
        write_federation_csv(&mut buf, &clients).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "client_id,split,y,x0,x1,x2,x3");
        assert_eq!(lines.count(), 3 * 7);
        assert!(!text.contains('\r'));
        assert_eq!(read_federation_csv(text.as_bytes()).unwrap(), clients);
    }

    #[test]
    fn rejects_bad_header_and_split() {
        assert!(read_federation_csv("a,b,c\n".as_bytes()).is_err());
        assert!(read_federation_csv("client_id,split,y,x0\n0,valid,1,0.5\n".as_bytes()).is_err());
        assert!(read_federation_csv("client_id,split,y,x1\n".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn floats_round_trip(values in proptest::collection::vec(-1e6f64..1e6, 6)) {
            let x = DenseMatrix::from_vec(3, 2, values).unwrap();
            let c = ClientDataset::new(4, x.clone(), vec![0.0, 1.0, 1.0], x, vec![1.0, 0.0, 0.0]).unwrap();
            let mut buf = Vec::new();
            write_federation_csv(&mut buf, std::slice::from_ref(&c)).unwrap();
            let back = read_federation_csv(buf.as_slice()).unwrap();
            prop_assert_eq!(back, vec![c]);
        }
    }
}
