from app.commands import ablate, evaluate, extract, gen_data, pretrain, train

# Every subcommand of the CLI; main.py registers them on the root group
commands = [
    gen_data.gen_data,
    pretrain.pretrain,
    train.train,
    evaluate.evaluate,
    extract.extract,
    ablate.ablate,
]
