# 实验流程层：级联、随机 HJB、Isaacs 博弈与验证套件
