"""Regenerates the TensorFlow-converted reference models in this directory.

Each model is converted with the stock TFLite converter and executed with
tf.lite.Interpreter; the interpreter's per-operator output tensors and
reference outputs are written to manifest.json so the C++ parser and
engine can be checked against the official runtime.

Usage: python3 generate.py   (needs tensorflow; output is committed)
"""
import json
import os
import struct

import numpy as np
import tensorflow as tf

HERE = os.path.dirname(os.path.abspath(__file__))
TENSOR_MAGIC = b"MPTN"
DTYPE_NAMES = {np.float32: "float32", np.uint8: "uint8", np.int8: "int8", np.int32: "int32"}


def write_tensor(path, array):
    array = np.asarray(array, dtype=np.float32)
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<III", 0, array.ndim, 0))
        f.write(struct.pack("<%di" % array.ndim, *array.shape))
        f.write(array.astype("<f4").tobytes())


def tiny_cnn():
    return tf.keras.Sequential([
        tf.keras.Input((16, 16, 3), batch_size=1),
        tf.keras.layers.Conv2D(4, 3, strides=2, padding="same", activation="relu"),
        tf.keras.layers.DepthwiseConv2D(3, padding="same", activation="relu6"),
        tf.keras.layers.Conv2D(6, 1),
        tf.keras.layers.MaxPooling2D(2),
        tf.keras.layers.AveragePooling2D(2, padding="same"),
        tf.keras.layers.Flatten(),
        tf.keras.layers.Dense(3),
        tf.keras.layers.Softmax(),
    ])


def residual():
    inp = tf.keras.Input((12, 12, 3), batch_size=1)
    a = tf.keras.layers.Conv2D(5, 3, padding="same", activation="relu")(inp)
    b = tf.keras.layers.Conv2D(5, 1)(a)
    c = tf.keras.layers.Add()([a, b])
    c = tf.keras.layers.ReLU()(c)
    c = tf.keras.layers.GlobalAveragePooling2D()(c)
    c = tf.keras.layers.Dense(4)(c)
    out = tf.keras.layers.Softmax()(c)
    return tf.keras.Model(inp, out)


def convert(model, quantize=False, rng=None):
    converter = tf.lite.TFLiteConverter.from_keras_model(model)
    if quantize:
        shape = model.input_shape[1:]

        def representative():
            for _ in range(32):
                yield [rng.uniform(0, 1, size=(1,) + shape).astype(np.float32)]

        converter.optimizations = [tf.lite.Optimize.DEFAULT]
        converter.representative_dataset = representative
        converter.target_spec.supported_ops = [tf.lite.OpsSet.TFLITE_BUILTINS_INT8]
    return converter.convert()


def describe(blob, name, rng, n_ref=3):
    interp = tf.lite.Interpreter(
        model_content=blob,
        experimental_op_resolver_type=tf.lite.experimental.OpResolverType.BUILTIN_WITHOUT_DEFAULT_DELEGATES)
    interp.allocate_tensors()
    details = {t["index"]: t for t in interp.get_tensor_details()}
    layers = []
    for op in interp._get_ops_details():
        if op["op_name"] == "DELEGATE":
            continue
        t = details[int(op["outputs"][0])]
        layers.append({
            "identifier": t["name"],
            "shape": [int(v) for v in t["shape"]],
            "dtype": DTYPE_NAMES.get(t["dtype"], "other"),
            "opcode": op["op_name"],
        })
    inp = interp.get_input_details()[0]
    out = interp.get_output_details()[0]
    refs = []
    for i in range(n_ref):
        x = rng.uniform(0, 1, size=inp["shape"]).astype(np.float32)
        interp.set_tensor(inp["index"], x)
        interp.invoke()
        y = interp.get_tensor(out["index"]).astype(np.float32)
        xin, yout = "%s.in%d.tensor" % (name, i), "%s.out%d.tensor" % (name, i)
        write_tensor(os.path.join(HERE, xin), x)
        write_tensor(os.path.join(HERE, yout), y)
        refs.append({"input": xin, "output": yout})
    return layers, refs


def main():
    tf.keras.utils.set_random_seed(0)
    rng = np.random.default_rng(0)
    entries = []
    base = tiny_cnn()
    for name, model, quant in [("tiny_cnn_float", base, False),
                               ("residual_float", residual(), False),
                               ("tiny_cnn_int8", base, True)]:
        blob = convert(model, quant, rng)
        with open(os.path.join(HERE, name + ".tflite"), "wb") as f:
            f.write(blob)
        layers, refs = describe(blob, name, rng)
        lineage = {"kind": "base"} if not quant else {
            "kind": "derived", "base": "tiny_cnn_float", "method": "quantized"}
        entries.append({"name": name, "file": name + ".tflite", "lineage": lineage,
                        "output_is_probability": True,
                        "layers": layers, "reference": refs})
    with open(os.path.join(HERE, "manifest.json"), "w") as f:
        json.dump({"generator": "tensorflow " + tf.__version__, "seed": 0,
                   "models": entries}, f, indent=1)


if __name__ == "__main__":
    main()
