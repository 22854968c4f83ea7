//! Functions compiled into every agent so that any worker can run them.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::time::Duration;

use crate::app::Registry;
use crate::data;
use crate::task::TaskError;
use crate::value::Value;

/// Name of the transfer app used by synthetic staging tasks.
pub const STAGE_HTTP: &str = "stage_http";

fn arg<'a>(args: &'a [Value], i: usize, app: &str) -> Result<&'a Value, TaskError> {
    args.get(i)
        .ok_or_else(|| TaskError::app(format!("{app}: missing argument {i}")))
}

fn int_arg(args: &[Value], i: usize, app: &str) -> Result<i64, TaskError> {
    arg(args, i, app)?
        .as_int()
        .ok_or_else(|| TaskError::app(format!("{app}: argument {i} is not an integer")))
}

fn str_arg<'a>(args: &'a [Value], i: usize, app: &str) -> Result<&'a str, TaskError> {
    arg(args, i, app)?
        .as_str()
        .ok_or_else(|| TaskError::app(format!("{app}: argument {i} is not a string")))
}

fn numbers(args: &[Value], app: &str) -> Result<Vec<Value>, TaskError> {
    let flat: Vec<Value> = match args {
        [Value::List(items)] => items.clone(),
        _ => args.to_vec(),
    };
    if flat.iter().any(|v| v.as_float().is_none()) {
        return Err(TaskError::app(format!("{app}: arguments must be numbers")));
    }
    Ok(flat)
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Order-sensitive integer mixing used by the randomized graph tests.
pub fn mix_ints(values: &[i64]) -> i64 {
    values
        .iter()
        .fold(0x5eed_u64, |h, v| splitmix(h ^ (*v as u64)))
        .wrapping_shr(1) as i64
}

pub(crate) fn install(r: &mut Registry) {
    r.register("noop", "1", |_, _| Ok(Value::Int(0)));

    r.register("sleep", "1", |args, _| {
        let ms = arg(args, 0, "sleep")?
            .as_float()
            .ok_or_else(|| TaskError::app("sleep: duration must be a number of milliseconds"))?;
        std::thread::sleep(Duration::from_secs_f64(ms.max(0.0) / 1000.0));
        Ok(args[0].clone())
    });

    r.register("hello", "1", |args, _| {
        let name = str_arg(args, 0, "hello")?;
        Ok(Value::Str(format!("Hello {name}")))
    });

    r.register("identity", "1", |args, _| {
        Ok(match args {
            [single] => single.clone(),
            _ => Value::List(args.to_vec()),
        })
    });

    r.register("add", "1", |args, _| {
        let nums = numbers(args, "add")?;
        if nums.iter().all(|v| matches!(v, Value::Int(_))) {
            Ok(Value::Int(
                nums.iter()
                    .filter_map(Value::as_int)
                    .fold(0i64, i64::wrapping_add),
            ))
        } else {
            Ok(Value::Float(nums.iter().filter_map(Value::as_float).sum()))
        }
    });

    r.register("mul", "1", |args, _| {
        let nums = numbers(args, "mul")?;
        if nums.iter().all(|v| matches!(v, Value::Int(_))) {
            Ok(Value::Int(
                nums.iter()
                    .filter_map(Value::as_int)
                    .fold(1i64, i64::wrapping_mul),
            ))
        } else {
            Ok(Value::Float(
                nums.iter().filter_map(Value::as_float).product(),
            ))
        }
    });

    r.register("concat", "1", |args, kwargs| {
        let sep = kwargs.get("sep").and_then(Value::as_str).unwrap_or("");
        let parts: Vec<String> = args.iter().map(ToString::to_string).collect();
        Ok(Value::Str(parts.join(sep)))
    });

    r.register("fail", "1", |args, _| {
        let msg = args
            .first()
            .map(ToString::to_string)
            .unwrap_or_else(|| "requested failure".to_string());
        Err(TaskError::App { message: msg })
    });

    // Counts its invocations in a file so the count survives process
    // boundaries; fails while the count is at most `fail_times`.
    r.register("flaky", "1", |args, _| {
        let path = str_arg(args, 0, "flaky")?;
        let fail_times = int_arg(args, 1, "flaky")?;
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| TaskError::app(format!("flaky: {e}")))?;
        f.write_all(b".")
            .map_err(|e| TaskError::app(format!("flaky: {e}")))?;
        drop(f);
        let count = std::fs::metadata(path)
            .map_err(|e| TaskError::app(format!("flaky: {e}")))?
            .len() as i64;
        if count <= fail_times {
            Err(TaskError::app(format!("flaky: injected failure {count}")))
        } else {
            Ok(Value::Int(count))
        }
    });

    r.register("mix", "1", |args, _| {
        let ints = args
            .iter()
            .map(|v| {
                v.as_int()
                    .ok_or_else(|| TaskError::app("mix: arguments must be integers"))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Value::Int(mix_ints(&ints)))
    });

    r.register("env", "1", |args, _| {
        let name = str_arg(args, 0, "env")?;
        Ok(Value::Str(std::env::var(name).unwrap_or_default()))
    });

    r.register("pid", "1", |_, _| Ok(Value::Int(std::process::id() as i64)));

    r.register("cat", "1", |args, _| {
        let path = match arg(args, 0, "cat")? {
            Value::File(f) => f
                .path()
                .ok_or_else(|| TaskError::app(format!("cat: {} is not staged", f.uri)))?,
            Value::Str(s) => s.into(),
            _ => return Err(TaskError::app("cat: argument must be a file")),
        };
        std::fs::read_to_string(&path)
            .map(Value::Str)
            .map_err(|e| TaskError::app(format!("cat {}: {e}", path.display())))
    });

    r.register(STAGE_HTTP, "1", |args, _| {
        let file = arg(args, 0, STAGE_HTTP)?
            .as_file()
            .ok_or_else(|| TaskError::app("stage_http: first argument must be a file"))?;
        let dest = str_arg(args, 1, STAGE_HTTP)?;
        data::stage_http(file, Path::new(dest)).map(Value::File)
    });
}
