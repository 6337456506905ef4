//! Thin helpers over Arrow/Parquet for the on-disk tables.

use std::fs::File;
use std::path::Path;
use std::sync::Arc;

use arrow_array::{Array, ArrayRef, RecordBatch, StringArray};
use arrow_schema::{DataType, Field, Schema};
use parquet::arrow::arrow_reader::ParquetRecordBatchReaderBuilder;
use parquet::arrow::{ArrowWriter, ProjectionMask};
use parquet::file::properties::WriterProperties;

pub type TableResult<T> = Result<T, String>;

/// Writes one record batch with fixed writer properties so identical data
/// yields identical bytes.
pub fn write_parquet(path: &Path, columns: Vec<(&str, ArrayRef)>) -> TableResult<()> {
    let fields: Vec<Field> = columns
        .iter()
        .map(|(name, a)| Field::new(*name, a.data_type().clone(), true))
        .collect();
    let schema = Arc::new(Schema::new(fields));
    let batch = RecordBatch::try_new(schema.clone(), columns.into_iter().map(|(_, a)| a).collect())
        .map_err(|e| e.to_string())?;
    let file = File::create(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let props = WriterProperties::builder().set_created_by("evstream".into()).build();
    let mut writer = ArrowWriter::try_new(file, schema, Some(props)).map_err(|e| e.to_string())?;
    writer.write(&batch).map_err(|e| e.to_string())?;
    writer.close().map_err(|e| e.to_string())?;
    Ok(())
}

/// Reads the named columns (all columns when `columns` is `None`).
pub fn read_parquet(path: &Path, columns: Option<&[&str]>) -> TableResult<Vec<RecordBatch>> {
    let file = File::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let builder = ParquetRecordBatchReaderBuilder::try_new(file).map_err(|e| e.to_string())?;
    let builder = match columns {
        Some(cols) => {
            let schema = builder.schema().clone();
            let mut idx = Vec::with_capacity(cols.len());
            for c in cols {
                idx.push(
                    schema
                        .index_of(c)
                        .map_err(|_| format!("{}: missing column `{c}`", path.display()))?,
                );
            }
            let mask = ProjectionMask::roots(builder.parquet_schema(), idx);
            builder.with_projection(mask)
        }
        None => builder,
    };
    let reader = builder.with_batch_size(8192).build().map_err(|e| e.to_string())?;
    reader.map(|b| b.map_err(|e| e.to_string())).collect()
}

/// Casts any column to strings; nulls stay `None`.
pub fn column_as_strings(array: &ArrayRef) -> TableResult<Vec<Option<String>>> {
    let cast = arrow_cast::cast(array, &DataType::Utf8).map_err(|e| e.to_string())?;
    let strings = cast
        .as_any()
        .downcast_ref::<StringArray>()
        .ok_or_else(|| "utf8 cast produced unexpected array".to_string())?;
    Ok((0..strings.len())
        .map(|i| (!strings.is_null(i)).then(|| strings.value(i).to_string()))
        .collect())
}

pub fn column<'a, A: 'static>(batch: &'a RecordBatch, name: &str) -> TableResult<&'a A> {
    batch
        .column_by_name(name)
        .ok_or_else(|| format!("missing column `{name}`"))?
        .as_any()
        .downcast_ref::<A>()
        .ok_or_else(|| format!("column `{name}` has an unexpected type"))
}
