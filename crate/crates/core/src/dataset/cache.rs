//! `EVDS` corpus cache in the checkpoint container conventions:
//! magic, version, class count, then the train and test splits, each as an
//! image count followed by `(label u32, 3072 x f32)` records.

use std::io::{Read, Write};

use super::image::{Image, LabeledImage, IMAGE_LEN};
use super::Corpus;
use crate::error::{Error, Result};
use crate::numnet::checkpoint::{
    read_f32s, read_header, read_u32, write_f32s, write_header, write_u32,
};

pub const CORPUS_MAGIC: &[u8; 4] = b"EVDS";

pub fn save_corpus<W: Write>(w: &mut W, corpus: &Corpus) -> Result<()> {
    write_header(w, CORPUS_MAGIC)?;
    write_u32(w, corpus.class_count as u32)?;
    for split in [&corpus.train, &corpus.test] {
        write_u32(w, split.len() as u32)?;
        for s in split {
            write_u32(w, s.label as u32)?;
            write_f32s(w, s.image.data())?;
        }
    }
    Ok(())
}

pub fn load_corpus<R: Read>(r: &mut R) -> Result<Corpus> {
    read_header(r, CORPUS_MAGIC)?;
    let class_count = read_u32(r)? as usize;
    let read_split = |r: &mut R| -> Result<Vec<LabeledImage>> {
        let n = read_u32(r)? as usize;
        (0..n)
            .map(|_| {
                let label = read_u32(r)? as usize;
                if label >= class_count {
                    return Err(Error::Checkpoint(format!(
                        "label {label} >= class count {class_count}"
                    )));
                }
                let image = Image::new(read_f32s(r, IMAGE_LEN)?)
                    .map_err(|e| Error::Checkpoint(e.to_string()))?;
                Ok(LabeledImage { image, label })
            })
            .collect()
    };
    let train = read_split(r)?;
    let test = read_split(r)?;
    Ok(Corpus {
        class_count,
        train,
        test,
    })
}
