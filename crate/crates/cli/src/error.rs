use simplefold_core::CoreError;

/// A problem with what the user supplied (config, paths, inputs); exit code 1.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct InputError(pub String);

pub fn input(msg: impl Into<String>) -> anyhow::Error {
    InputError(msg.into()).into()
}

/// 1 for input errors, 2 for everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<InputError>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            if matches!(
                e,
                CoreError::Parse { .. } | CoreError::EmptyStructure | CoreError::MissingCoordinates(_) | CoreError::Format(_)
            ) {
                return 1;
            }
        }
    }
    2
}
