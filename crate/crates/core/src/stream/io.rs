//! Columnar text formats: streams as `step,label,cluster,f0..fd` and slice
//! assignments as `example_index,slice_id`.

use std::io::{Read, Write};

use super::{Example, Stream, StreamError};
use crate::trace::SliceId;

fn fmt_err(e: impl std::fmt::Display) -> StreamError {
    StreamError::Format(e.to_string())
}

pub fn write_stream<W: Write>(writer: W, stream: &Stream) -> Result<(), StreamError> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["step".to_string(), "label".into(), "cluster".into()];
    header.extend((0..stream.dim()).map(|i| format!("f{i}")));
    w.write_record(&header).map_err(fmt_err)?;
    for e in stream.examples() {
        let mut row = vec![e.step.to_string(), e.label.to_string(), e.true_cluster.to_string()];
        row.extend(e.features.iter().map(|f| f.to_string()));
        w.write_record(&row).map_err(fmt_err)?;
    }
    w.flush().map_err(fmt_err)
}

pub fn read_stream<R: Read>(reader: R, horizon: u64) -> Result<Stream, StreamError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers().map_err(fmt_err)?.clone();
    if headers.len() < 4 || &headers[0] != "step" || &headers[1] != "label" || &headers[2] != "cluster" {
        return Err(StreamError::Format("expected step,label,cluster,f0.. header".into()));
    }
    let dim = headers.len() - 3;
    let mut examples = Vec::new();
    for record in rdr.records() {
        let r = record.map_err(fmt_err)?;
        let features = (3..3 + dim)
            .map(|i| r[i].parse::<f64>().map_err(fmt_err))
            .collect::<Result<_, _>>()?;
        examples.push(Example {
            step: r[0].parse().map_err(fmt_err)?,
            label: r[1].parse().map_err(fmt_err)?,
            true_cluster: r[2].parse().map_err(fmt_err)?,
            features,
        });
    }
    Stream::new(horizon, dim, examples)
}

pub fn write_slices<W: Write>(writer: W, labels: &[SliceId]) -> Result<(), StreamError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["example_index", "slice_id"]).map_err(fmt_err)?;
    for (i, l) in labels.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()]).map_err(fmt_err)?;
    }
    w.flush().map_err(fmt_err)
}

pub fn read_slices<R: Read>(reader: R) -> Result<Vec<SliceId>, StreamError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut labels = Vec::new();
    for (expected, record) in rdr.records().enumerate() {
        let r = record.map_err(fmt_err)?;
        let index: usize = r[0].parse().map_err(fmt_err)?;
        if index != expected {
            return Err(StreamError::Format(format!(
                "slice record {expected} has index {index}"
            )));
        }
        labels.push(r[1].parse().map_err(fmt_err)?);
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::generate;
    use crate::stream::tests::two_cluster_spec;

    #[test]
    fn stream_round_trip_is_exact() {
        let s = generate(&two_cluster_spec(300, 21)).unwrap();
        let mut buf = Vec::new();
        write_stream(&mut buf, &s).unwrap();
        assert!(buf.starts_with(b"step,label,cluster,f0,f1\n"));
        assert_eq!(read_stream(buf.as_slice(), 300).unwrap(), s);
    }

    #[test]
    fn slices_round_trip() {
        let labels = vec![0, 3, 1, 1];
        let mut buf = Vec::new();
        write_slices(&mut buf, &labels).unwrap();
        assert_eq!(read_slices(buf.as_slice()).unwrap(), labels);
    }
}
